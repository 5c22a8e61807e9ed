"""Ground-truth labels for a lattice scene: foreground mask, fractional
center labels and per-node box geometry targets."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .geometry import OrientedBox, encode_geometry
from .lattice import Lattice

log = logging.getLogger(__name__)


class LabelError(ValueError):
    pass


class BoxOutOfBounds(LabelError):
    pass


class EmptyBox(LabelError):
    pass


@dataclass
class SceneLabels:
    lattice: Lattice
    fg_mask: np.ndarray  # bool per node
    center_labels: list[dict[int, float]]
    box_targets: np.ndarray  # (N, 5) pixel distances + angle, NaN on background
    box_centers: list[int]  # center node per box, -1 for skipped boxes
    box_nodes: list[np.ndarray]  # covered nodes per box
    primary_center: np.ndarray  # nearest labeled center per node (self on background)
    skipped: list[int] = field(default_factory=list)
    _triples: tuple | None = field(default=None, repr=False, compare=False)

    @property
    def centers(self) -> list[int]:
        return sorted({c for c in self.box_centers if c >= 0})

    def coverage(self, center: int) -> np.ndarray:
        """Nodes whose label references ``center``."""
        return np.array([i for i, lab in enumerate(self.center_labels) if center in lab
                         and self.fg_mask[i]], dtype=np.int64)

    def weight(self, node: int, center: int) -> float:
        return self.center_labels[node].get(center, 0.0)

    def triples(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Nonzero label entries as (node, center, weight) arrays, node-major."""
        if self._triples is None:
            rows, cols, vals = [], [], []
            for i, lab in enumerate(self.center_labels):
                for j, m in lab.items():
                    if m:
                        rows.append(i)
                        cols.append(j)
                        vals.append(m)
            self._triples = (np.array(rows, dtype=np.int64), np.array(cols, dtype=np.int64),
                             np.array(vals, dtype=np.float64))
        return self._triples


def _check_bounds(box: OrientedBox, lattice: Lattice, tol: float = 1e-6):
    pts = box.corners()
    if (pts[:, 0].min() < -tol or pts[:, 1].min() < -tol
            or pts[:, 0].max() > lattice.width_px + tol or pts[:, 1].max() > lattice.height_px + tol):
        raise BoxOutOfBounds(f"box {box} exceeds image {lattice.width_px}x{lattice.height_px}")


def covered_nodes(lattice: Lattice, box: OrientedBox) -> np.ndarray:
    return np.flatnonzero(box.contains(lattice.pixel_centers))


def nearest_node(lattice: Lattice, candidates: np.ndarray, point) -> int:
    d = np.hypot(*(lattice.pixel_centers[candidates] - np.asarray(point)).T)
    return int(candidates[np.argmin(d)])


def label_scene(lattice: Lattice, gt_boxes: list[OrientedBox]) -> SceneLabels:
    n = lattice.node_count
    coverage: list[np.ndarray] = []
    centers: list[int] = []
    skipped = []
    for k, box in enumerate(gt_boxes):
        _check_bounds(box, lattice)
        nodes = covered_nodes(lattice, box)
        if nodes.size == 0:
            log.warning("EmptyBox: box %d covers no node centers; skipped", k)
            skipped.append(k)
            centers.append(-1)
            coverage.append(nodes)
            continue
        # center node is taken among the box's own nodes so it lies in its coverage
        centers.append(nearest_node(lattice, nodes, (box.cx, box.cy)))
        coverage.append(nodes)

    owners: list[list[int]] = [[] for _ in range(n)]
    for k, nodes in enumerate(coverage):
        for i in nodes:
            owners[i].append(k)

    fg = np.array([bool(o) for o in owners])
    labels: list[dict[int, float]] = []
    primary = np.arange(n, dtype=np.int64)
    targets = np.full((n, 5), np.nan)
    for i in range(n):
        if not owners[i]:
            labels.append({i: 1.0})
            continue
        share = 1.0 / len(owners[i])
        lab: dict[int, float] = {}
        for k in owners[i]:
            lab[centers[k]] = lab.get(centers[k], 0.0) + share
        labels.append(dict(sorted(lab.items())))
        best = min(owners[i], key=lambda k: (lattice.manhattan(i, centers[k]), centers[k], k))
        primary[i] = centers[best]
        targets[i] = encode_geometry(lattice.pixel_center(i), gt_boxes[best].canonical()).as_array()

    return SceneLabels(lattice, fg, labels, targets, centers, coverage, primary, skipped)
