"""Oriented boxes and the detection tail: decode, merge, PCA fit, IoU, NMS, P/R/F."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

HALF_PI = math.pi / 2
QUARTER_PI = math.pi / 4


class GeometryError(ValueError):
    pass


class DegenerateBox(GeometryError):
    pass


class EmptyCluster(GeometryError):
    pass


def _wrap_half_turn(angle: float) -> float:
    """Map an angle into (-pi/2, pi/2]."""
    a = math.fmod(angle, math.pi)
    if a > HALF_PI:
        a -= math.pi
    elif a <= -HALF_PI:
        a += math.pi
    return a


@dataclass(frozen=True)
class OrientedBox:
    """Rectangle of extent ``w`` along direction ``angle`` and ``h`` across it.

    Image coordinates: x to the right, y down.
    """

    cx: float
    cy: float
    w: float
    h: float
    angle: float = 0.0

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise DegenerateBox(f"box extents must be positive, got w={self.w}, h={self.h}")
        for name in ("cx", "cy", "w", "h"):
            object.__setattr__(self, name, float(getattr(self, name)))
        object.__setattr__(self, "angle", _wrap_half_turn(float(self.angle)))

    @property
    def axes(self) -> tuple[np.ndarray, np.ndarray]:
        c, s = math.cos(self.angle), math.sin(self.angle)
        return np.array([c, s]), np.array([-s, c])

    @property
    def area(self) -> float:
        return self.w * self.h

    def corners(self) -> np.ndarray:
        """(4, 2) corners, counter-clockwise on screen (y down) starting at the
        corner that is top-left when the angle is 0."""
        u, v = self.axes
        c = np.array([self.cx, self.cy])
        hw, hh = self.w / 2, self.h / 2
        return np.array([
            c - hw * u - hh * v,
            c - hw * u + hh * v,
            c + hw * u + hh * v,
            c + hw * u - hh * v,
        ])

    def canonical(self) -> "OrientedBox":
        """Unique representation with angle in (-pi/4, pi/4]."""
        if self.angle > QUARTER_PI:
            return OrientedBox(self.cx, self.cy, self.h, self.w, self.angle - HALF_PI)
        if self.angle <= -QUARTER_PI:
            return OrientedBox(self.cx, self.cy, self.h, self.w, self.angle + HALF_PI)
        return self

    def aligned_to(self, angle: float) -> "OrientedBox":
        """Equivalent representation whose angle is closest to ``angle`` modulo pi."""
        alt = OrientedBox(self.cx, self.cy, self.h, self.w, self.angle + HALF_PI)
        d0 = abs(_wrap_half_turn(self.angle - angle))
        d1 = abs(_wrap_half_turn(alt.angle - angle))
        return self if d0 <= d1 else alt

    def contains(self, points, tol: float = 1e-9) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        u, v = self.axes
        rel = pts - [self.cx, self.cy]
        return (np.abs(rel @ u) <= self.w / 2 + tol) & (np.abs(rel @ v) <= self.h / 2 + tol)

    def to_dict(self, score: float | None = None) -> dict:
        d = {"cx": self.cx, "cy": self.cy, "w": self.w, "h": self.h, "angle_rad": self.angle}
        if score is not None:
            d["score"] = score
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "OrientedBox":
        return cls(float(d["cx"]), float(d["cy"]), float(d["w"]), float(d["h"]),
                   float(d.get("angle_rad", 0.0)))


def box_distance(a: OrientedBox, b: OrientedBox) -> float:
    """Max absolute parameter difference between two boxes, over the
    equivalent (w, h, angle) representations of ``b``."""
    b = b.aligned_to(a.angle)
    return max(abs(a.cx - b.cx), abs(a.cy - b.cy), abs(a.w - b.w), abs(a.h - b.h),
               abs(_wrap_half_turn(a.angle - b.angle)))


@dataclass(frozen=True)
class BoxGeometry:
    d_top: float
    d_bottom: float
    d_left: float
    d_right: float
    angle: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.d_top, self.d_bottom, self.d_left, self.d_right, self.angle])

    @classmethod
    def from_array(cls, a) -> "BoxGeometry":
        return cls(*(float(v) for v in a))


def encode_geometry(anchor_px, box: OrientedBox) -> BoxGeometry:
    """Distances from ``anchor_px`` to the four sides, in the box frame."""
    u, v = box.axes
    rel = np.asarray(anchor_px, dtype=np.float64) - [box.cx, box.cy]
    pu, pv = float(rel @ u), float(rel @ v)
    return BoxGeometry(box.h / 2 + pv, box.h / 2 - pv, box.w / 2 + pu, box.w / 2 - pu, box.angle)


def decode_geometry(anchor_px, g: BoxGeometry) -> OrientedBox:
    if min(g.d_top, g.d_bottom, g.d_left, g.d_right) < 0:
        raise DegenerateBox("side distances must be non-negative")
    w, h = g.d_left + g.d_right, g.d_top + g.d_bottom
    if w <= 0 or h <= 0:
        raise DegenerateBox(f"decoded box has w={w}, h={h}")
    c, s = math.cos(g.angle), math.sin(g.angle)
    du = (g.d_right - g.d_left) / 2
    dv = (g.d_bottom - g.d_top) / 2
    x, y = float(anchor_px[0]), float(anchor_px[1])
    return OrientedBox(x + du * c - dv * s, y + du * s + dv * c, w, h, g.angle).canonical()


def merge_boxes(boxes: list[OrientedBox], weights) -> OrientedBox:
    """Weighted average of box parameters; angles via the doubled-angle mean."""
    if not boxes:
        raise EmptyCluster("no boxes to merge")
    w = np.asarray(weights, dtype=np.float64)
    if w.sum() <= 0:
        w = np.ones(len(boxes))
    w = w / w.sum()
    ref = boxes[int(np.argmax(w))].angle
    aligned = [b.aligned_to(ref) for b in boxes]
    p = np.array([[b.cx, b.cy, b.w, b.h] for b in aligned])
    ang = np.array([b.angle for b in aligned])
    cx, cy, bw, bh = w @ p
    if np.all(ang == ang[0]):
        mean_angle = float(ang[0])
    else:
        mean_angle = 0.5 * math.atan2(float(w @ np.sin(2 * ang)), float(w @ np.cos(2 * ang)))
    return OrientedBox(float(cx), float(cy), float(bw), float(bh), mean_angle).canonical()


def merge_by_center(geometries, fg_conf, assignment, lattice) -> list[OrientedBox]:
    """One box per cluster from per-node geometry predictions.

    ``geometries`` is a (node_count, 5) array of ``[top, bottom, left, right]``
    pixel distances plus angle; ``assignment`` maps nodes to centers.
    """
    geometries = np.asarray(geometries, dtype=np.float64)
    fg_conf = np.asarray(fg_conf, dtype=np.float64)
    out = []
    for center, members in assignment.clusters.items():
        if not members:
            raise EmptyCluster(f"cluster {center} has no members")
        boxes, weights = [], []
        for node in members:
            g = geometries[node].copy()
            g[:4] = np.maximum(g[:4], 0.0)
            try:
                boxes.append(decode_geometry(lattice.pixel_center(node), BoxGeometry.from_array(g)))
            except DegenerateBox:
                continue
            weights.append(fg_conf[node])
        if not boxes:
            raise EmptyCluster(f"cluster {center} has no decodable members")
        out.append(merge_boxes(boxes, weights))
    return out


def pca_box_from_cluster(members, lattice) -> OrientedBox:
    """Box around a node cluster from the principal axes of its cell centers."""
    nodes = np.unique(np.asarray(members, dtype=np.int64))
    if nodes.size == 0:
        raise EmptyCluster("cluster has no nodes")
    pts = lattice.pixel_centers[nodes]
    d = lattice.factor
    mean = pts.mean(axis=0)
    rel = pts - mean
    cov = rel.T @ rel / len(pts)
    # eigh: ascending eigenvalues, major axis last
    evals, evecs = np.linalg.eigh(cov)
    if math.isclose(evals[0], evals[1], rel_tol=1e-9, abs_tol=1e-12):
        u = np.array([1.0, 0.0])
    else:
        u = evecs[:, 1]
    angle = _wrap_half_turn(math.atan2(u[1], u[0]))
    u = np.array([math.cos(angle), math.sin(angle)])
    v = np.array([-u[1], u[0]])
    pu, pv = rel @ u, rel @ v
    lo_u, hi_u = pu.min() - d / 2, pu.max() + d / 2
    lo_v, hi_v = pv.min() - d / 2, pv.max() + d / 2
    c = mean + u * (lo_u + hi_u) / 2 + v * (lo_v + hi_v) / 2
    return OrientedBox(float(c[0]), float(c[1]), float(hi_u - lo_u), float(hi_v - lo_v), angle)


def _clip(subject: list, a: np.ndarray, b: np.ndarray) -> list:
    """Clip a polygon against the half-plane left of edge a->b."""
    ex, ey = b - a

    def side(p):
        return ex * (p[1] - a[1]) - ey * (p[0] - a[0])

    out = []
    n = len(subject)
    for k in range(n):
        p, q = subject[k], subject[(k + 1) % n]
        sp_, sq = side(p), side(q)
        if sp_ >= 0:
            out.append(p)
        if (sp_ >= 0) != (sq >= 0):
            t = sp_ / (sp_ - sq)
            out.append(p + t * (q - p))
    return out


def _poly_area(poly) -> float:
    if len(poly) < 3:
        return 0.0
    p = np.asarray(poly)
    x, y = p[:, 0], p[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def intersection_area(a: OrientedBox, b: OrientedBox) -> float:
    # clipper interior must lie left of each edge (positive signed area)
    pa, pb = a.corners(), b.corners()
    if _signed_area(pb) < 0:
        pb = pb[::-1]
    poly = list(pa)
    for k in range(4):
        if not poly:
            return 0.0
        poly = _clip(poly, pb[k], pb[(k + 1) % 4])
    return _poly_area(poly)


def _signed_area(p: np.ndarray) -> float:
    x, y = p[:, 0], p[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def iou(a: OrientedBox, b: OrientedBox) -> float:
    # cheap reject on circumscribed circles
    ra, rb = math.hypot(a.w, a.h) / 2, math.hypot(b.w, b.h) / 2
    if math.hypot(a.cx - b.cx, a.cy - b.cy) >= ra + rb:
        return 0.0
    inter = intersection_area(a, b)
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return float(min(1.0, max(0.0, inter / union)))


def nms(boxes: list[OrientedBox], scores, iou_thresh: float) -> list[int]:
    """Indices of kept boxes, in descending score order (stable on ties)."""
    scores = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    order = sorted(range(len(boxes)), key=lambda k: -scores[k])
    kept: list[int] = []
    for k in order:
        if all(iou(boxes[k], boxes[m]) < iou_thresh for m in kept):
            kept.append(k)
    return kept


@dataclass
class DetectionMetrics:
    precision: float
    recall: float
    f_score: float
    matches: list[tuple[int, int]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"precision": self.precision, "recall": self.recall, "f_score": self.f_score,
                "matches": [list(m) for m in self.matches]}


def evaluate(preds: list[OrientedBox], gts: list[OrientedBox], iou_thresh: float = 0.5) -> DetectionMetrics:
    if not 0 < iou_thresh < 1:
        raise ValueError("iou_thresh must lie in (0, 1)")
    pairs = []
    for pi, p in enumerate(preds):
        for gi, g in enumerate(gts):
            v = iou(p, g)
            if v >= iou_thresh:
                pairs.append((-v, pi, gi))
    pairs.sort()
    used_p, used_g, matches = set(), set(), []
    for _, pi, gi in pairs:
        if pi in used_p or gi in used_g:
            continue
        used_p.add(pi)
        used_g.add(gi)
        matches.append((pi, gi))
    p = len(matches) / len(preds) if preds else 0.0
    r = len(matches) / len(gts) if gts else 0.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return DetectionMetrics(p, r, f, sorted(matches))


def assemble_boxes(assignment, lattice, fg_conf, geometries=None, merge: str = "regress",
                   nms_thresh: float = 0.5) -> tuple[list[OrientedBox], list[float]]:
    """Clusters to scored boxes: one box per cluster (regressed geometry or
    PCA of the member nodes), score = summed fg confidence, then NMS."""
    fg_conf = np.asarray(fg_conf, dtype=np.float64)
    if merge == "regress":
        if geometries is None:
            raise ValueError("regress merge needs per-node geometries")
        boxes = merge_by_center(geometries, fg_conf, assignment, lattice)
    elif merge == "pca":
        boxes = [pca_box_from_cluster(m, lattice) for m in assignment.clusters.values()]
    else:
        raise ValueError(f"unknown merge path {merge!r}")
    scores = [float(fg_conf[m].sum()) for m in assignment.clusters.values()]
    kept = nms(boxes, scores, nms_thresh)
    return [boxes[k] for k in kept], [scores[k] for k in kept]
