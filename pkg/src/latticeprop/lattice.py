"""Lattice graph, neighbor topology and the normalized correlation field.

Every node carries five weights in the fixed slot order
``[SELF, UP, DOWN, LEFT, RIGHT]``.  A weight in slot ``k`` of node ``i``
is the share node ``i`` takes from the neighbor in direction ``k`` when
it aggregates confidences (incoming view).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

SELF, UP, DOWN, LEFT, RIGHT = range(5)
SLOTS = ("SELF", "UP", "DOWN", "LEFT", "RIGHT")
N_SLOTS = 5
OPPOSITE = {UP: DOWN, DOWN: UP, LEFT: RIGHT, RIGHT: LEFT}
# (dr, dc) per slot
OFFSETS = ((0, 0), (-1, 0), (1, 0), (0, -1), (0, 1))


class LatticeError(ValueError):
    """Base class for lattice construction and indexing errors."""


class NonDivisible(LatticeError):
    pass


class ZeroDimension(LatticeError):
    pass


class NodeOutOfRange(LatticeError, IndexError):
    pass


class NonFiniteLogit(LatticeError):
    pass


class LatticeMismatch(LatticeError):
    pass


@dataclass(frozen=True)
class Lattice:
    height_px: int
    width_px: int
    factor: int
    rows: int = field(init=False)
    cols: int = field(init=False)

    def __post_init__(self):
        for name in ("height_px", "width_px", "factor"):
            if int(getattr(self, name)) <= 0:
                raise ZeroDimension(f"{name} must be positive, got {getattr(self, name)}")
        if self.height_px % self.factor or self.width_px % self.factor:
            raise NonDivisible(
                f"factor {self.factor} does not divide {self.height_px}x{self.width_px}"
            )
        object.__setattr__(self, "rows", self.height_px // self.factor)
        object.__setattr__(self, "cols", self.width_px // self.factor)

    @property
    def node_count(self) -> int:
        return self.rows * self.cols

    @property
    def diameter(self) -> int:
        """Largest Manhattan distance between two nodes."""
        return self.rows + self.cols - 2

    def to_1d(self, r: int, c: int) -> int:
        if not (0 <= r < self.rows and 0 <= c < self.cols):
            raise NodeOutOfRange(f"({r}, {c}) outside {self.rows}x{self.cols}")
        return r * self.cols + c

    def to_2d(self, node: int) -> tuple[int, int]:
        self._check(node)
        return divmod(int(node), self.cols)

    def _check(self, node: int):
        if not (0 <= node < self.node_count):
            raise NodeOutOfRange(f"node {node} outside [0, {self.node_count})")

    def pixel_center(self, node: int) -> tuple[float, float]:
        """(x, y) pixel coordinates of a node's cell center."""
        r, c = self.to_2d(node)
        return (c + 0.5) * self.factor, (r + 0.5) * self.factor

    @cached_property
    def pixel_centers(self) -> np.ndarray:
        """(node_count, 2) array of (x, y) cell centers, row-major."""
        r, c = np.divmod(np.arange(self.node_count), self.cols)
        return np.stack([(c + 0.5) * self.factor, (r + 0.5) * self.factor], axis=1)

    @cached_property
    def neighbor_table(self) -> np.ndarray:
        """(node_count, 5) int array; column 0 is the node itself, -1 marks
        a neighbor outside the lattice."""
        r, c = np.divmod(np.arange(self.node_count), self.cols)
        table = np.empty((self.node_count, N_SLOTS), dtype=np.int64)
        for slot, (dr, dc) in enumerate(OFFSETS):
            rr, cc = r + dr, c + dc
            ok = (rr >= 0) & (rr < self.rows) & (cc >= 0) & (cc < self.cols)
            table[:, slot] = np.where(ok, rr * self.cols + cc, -1)
        table.setflags(write=False)
        return table

    @cached_property
    def slot_mask(self) -> np.ndarray:
        """(node_count, 5) bool array of existing slots (SELF always True)."""
        mask = self.neighbor_table >= 0
        mask.setflags(write=False)
        return mask

    def neighbors(self, node: int) -> list[tuple[int, int]]:
        """Existing neighbors of ``node`` as (slot, node-id), in slot order."""
        self._check(node)
        row = self.neighbor_table[node]
        return [(slot, int(row[slot])) for slot in (UP, DOWN, LEFT, RIGHT) if row[slot] >= 0]

    def manhattan(self, a: int, b: int) -> int:
        ra, ca = divmod(a, self.cols)
        rb, cb = divmod(b, self.cols)
        return abs(ra - rb) + abs(ca - cb)

    def to_json_header(self) -> dict:
        return {"rows": self.rows, "cols": self.cols, "factor": self.factor}

    @classmethod
    def from_grid(cls, rows: int, cols: int, factor: int = 1) -> "Lattice":
        return cls(rows * factor, cols * factor, factor)


def build_lattice(height_px: int, width_px: int, factor: int) -> Lattice:
    return Lattice(height_px, width_px, factor)


def neighbors(lattice: Lattice, node: int) -> list[tuple[int, int]]:
    return lattice.neighbors(node)


@dataclass(frozen=True, eq=False)
class CorrelationField:
    """Row-stochastic per-node weights over the five slots."""

    lattice: Lattice
    logits: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        for a in (self.logits, self.weights):
            a.setflags(write=False)

    def omega(self) -> np.ndarray:
        w = self.weights
        return np.stack([w[:, RIGHT] - w[:, LEFT], w[:, DOWN] - w[:, UP]], axis=1)

    def save(self, path) -> None:
        save_field(self, path)


def masked_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    z = np.where(mask, logits, -np.inf)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def normalize_field(lattice: Lattice, logits) -> CorrelationField:
    logits = np.array(logits, dtype=np.float64, copy=True)
    if logits.shape != (lattice.node_count, N_SLOTS):
        raise LatticeMismatch(
            f"logits shape {logits.shape} != ({lattice.node_count}, {N_SLOTS})"
        )
    if not np.all(np.isfinite(logits)):
        bad = np.argwhere(~np.isfinite(logits))[0]
        raise NonFiniteLogit(f"non-finite logit at node {bad[0]} slot {SLOTS[bad[1]]}")
    weights = masked_softmax(logits, lattice.slot_mask)
    return CorrelationField(lattice, logits, weights)


def field_from_weights(lattice: Lattice, weights) -> CorrelationField:
    """Field with prescribed weights (zeros allowed), e.g. for hand-built tests.

    Rows are renormalized over existing slots; logits are ``log(weights)``.
    """
    w = np.array(weights, dtype=np.float64, copy=True)
    if w.shape != (lattice.node_count, N_SLOTS):
        raise LatticeMismatch(f"weights shape {w.shape} != ({lattice.node_count}, {N_SLOTS})")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and non-negative")
    w[~lattice.slot_mask] = 0.0
    w /= w.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore"):
        logits = np.log(w)
    return CorrelationField(lattice, logits, w)


def field_to_dict(fld: CorrelationField) -> dict:
    out = fld.lattice.to_json_header()
    out["logits"] = [[float(v) for v in row] for row in fld.logits]
    return out


def save_field(fld: CorrelationField, path) -> None:
    # json writes floats with repr(), i.e. shortest round-trip (up to 17 digits)
    Path(path).write_text(json.dumps(field_to_dict(fld)) + "\n")


def field_from_dict(data: dict) -> CorrelationField:
    rows, cols, d = int(data["rows"]), int(data["cols"]), int(data["factor"])
    lat = Lattice(rows * d, cols * d, d)
    return normalize_field(lat, np.asarray(data["logits"], dtype=np.float64))


def load_field(path) -> CorrelationField:
    return field_from_dict(json.loads(Path(path).read_text()))
