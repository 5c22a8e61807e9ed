"""Synthetic scenes and analytic correlation fields that point every object
node at its labeled center."""
from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from randomgen import Xoshiro256

from .geometry import OrientedBox, iou
from .labels import SceneLabels, covered_nodes, label_scene, nearest_node
from .lattice import DOWN, LEFT, RIGHT, SELF, UP, CorrelationField, Lattice, normalize_field

IDEAL_LOGIT = 6.0


class PlacementFailed(RuntimeError):
    pass


@dataclass
class SceneConfig:
    h: int = 256
    w: int = 256
    d: int = 16
    n_boxes: int = 3
    scale_range: tuple[float, float] = (32.0, 64.0)  # short side, pixels
    aspect_range: tuple[float, float] = (1.0, 4.0)  # long / short
    angle_range: tuple[float, float] = (-math.pi / 3, math.pi / 3)
    allow_overlap: bool = False
    overlap_cap: float = 0.0
    max_retries: int = 1000

    def __post_init__(self):
        self.scale_range = tuple(float(v) for v in self.scale_range)
        self.aspect_range = tuple(float(v) for v in self.aspect_range)
        self.angle_range = tuple(float(v) for v in self.angle_range)
        for name in ("scale_range", "aspect_range", "angle_range"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ValueError(f"{name} is empty: {lo} > {hi}")
        if self.scale_range[0] <= 0 or self.aspect_range[0] <= 0:
            raise ValueError("scale and aspect must be positive")
        if self.n_boxes < 0:
            raise ValueError("n_boxes must be >= 0")


@dataclass
class SyntheticScene:
    lattice: Lattice
    gt_boxes: list[OrientedBox]
    labels: SceneLabels
    seed: int | None = None

    def to_dict(self) -> dict:
        lat = self.lattice
        out = {"image": {"h": lat.height_px, "w": lat.width_px, "d": lat.factor},
               "boxes": [b.to_dict() for b in self.gt_boxes]}
        if self.seed is not None:
            out["seed"] = self.seed
        return out

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")


def scene_from_dict(data: dict) -> SyntheticScene:
    img = data["image"]
    lat = Lattice(int(img["h"]), int(img["w"]), int(img["d"]))
    boxes = [OrientedBox.from_dict(b) for b in data.get("boxes", [])]
    return SyntheticScene(lat, boxes, label_scene(lat, boxes), data.get("seed"))


def load_scene(path) -> SyntheticScene:
    return scene_from_dict(json.loads(Path(path).read_text()))


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(Xoshiro256(int(seed)))


def monotone_reachable(lattice: Lattice, nodes: np.ndarray, center: int) -> bool:
    """True if every node reaches ``center`` inside ``nodes`` along a path
    whose length equals their Manhattan distance."""
    inside = set(int(v) for v in nodes)
    if center not in inside:
        return False
    dist = {center: 0}
    queue = deque([center])
    while queue:
        v = queue.popleft()
        for _, u in lattice.neighbors(v):
            if u in inside and u not in dist:
                dist[u] = dist[v] + 1
                queue.append(u)
    return all(dist.get(v, -1) == lattice.manhattan(v, center) for v in inside)


def _dilate(lattice: Lattice, nodes: np.ndarray) -> set[int]:
    out = set()
    for v in nodes:
        r, c = divmod(int(v), lattice.cols)
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                rr, cc = r + dr, c + dc
                if 0 <= rr < lattice.rows and 0 <= cc < lattice.cols:
                    out.add(rr * lattice.cols + cc)
    return out


def _sample_box(rng: np.random.Generator, cfg: SceneConfig) -> OrientedBox | None:
    short = rng.uniform(*cfg.scale_range)
    aspect = rng.uniform(*cfg.aspect_range)
    angle = rng.uniform(*cfg.angle_range)
    long = short * aspect
    c, s = abs(math.cos(angle)), abs(math.sin(angle))
    ex = c * long / 2 + s * short / 2
    ey = s * long / 2 + c * short / 2
    if 2 * ex > cfg.w or 2 * ey > cfg.h:
        return None
    cx = rng.uniform(ex, cfg.w - ex)
    cy = rng.uniform(ey, cfg.h - ey)
    return OrientedBox(cx, cy, long, short, angle)


def generate_scene(seed: int, config: SceneConfig | None = None) -> SyntheticScene:
    """Rejection-sample ``n_boxes`` boxes; deterministic in ``seed``.

    Without ``allow_overlap``, box coverages keep at least one empty node
    between them.  Every box must cover a node set in which the center is
    reachable by Manhattan-shortest paths.
    """
    cfg = config or SceneConfig()
    lat = Lattice(cfg.h, cfg.w, cfg.d)
    rng = make_rng(seed)
    boxes: list[OrientedBox] = []
    blocked: set[int] = set()
    for k in range(cfg.n_boxes):
        for _ in range(cfg.max_retries):
            box = _sample_box(rng, cfg)
            if box is None:
                continue
            nodes = covered_nodes(lat, box)
            if nodes.size == 0:
                continue
            if not cfg.allow_overlap:
                if blocked.intersection(int(v) for v in nodes):
                    continue
                if any(iou(box, b) > cfg.overlap_cap for b in boxes):
                    continue
            center = nearest_node(lat, nodes, (box.cx, box.cy))
            if not monotone_reachable(lat, nodes, center):
                continue
            boxes.append(box)
            blocked |= _dilate(lat, nodes)
            break
        else:
            raise PlacementFailed(f"could not place box {k} after {cfg.max_retries} tries")
    return SyntheticScene(lat, boxes, label_scene(lat, boxes), int(seed))


def ideal_logits(lattice: Lattice, labels: SceneLabels, dominant: float = IDEAL_LOGIT) -> np.ndarray:
    n = lattice.node_count
    logits = np.zeros((n, 5))
    centers = set(labels.centers)
    nb = lattice.neighbor_table
    for i in range(n):
        if not labels.fg_mask[i] or i in centers:
            logits[i, SELF] = dominant
            continue
        j = int(labels.primary_center[i])
        dist = lattice.manhattan(i, j)
        closer = [s for s in (UP, DOWN, LEFT, RIGHT)
                  if nb[i, s] >= 0 and lattice.manhattan(int(nb[i, s]), j) == dist - 1]
        inside = [s for s in closer if j in labels.center_labels[int(nb[i, s])]]
        logits[i, (inside or closer)[0]] = dominant
    return logits


def ideal_field(lattice: Lattice, labels: SceneLabels, dominant: float = IDEAL_LOGIT) -> CorrelationField:
    return normalize_field(lattice, ideal_logits(lattice, labels, dominant))


def config_dict(cfg: SceneConfig) -> dict:
    d = asdict(cfg)
    for k in ("scale_range", "aspect_range", "angle_range"):
        d[k] = list(d[k])
    return d
