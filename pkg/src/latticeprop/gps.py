"""Greedy Path Selection: every node follows its strongest link until it is
trapped, and nearby traps are reconciled by CP on a small sub-grid."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .cp import DEFAULT_TOL, ClusterAssignment, cp_run, extract_centers, init_one_hot
from .lattice import CorrelationField, Lattice, LatticeMismatch, field_from_weights

DEFAULT_DT = 3.0


class CycleDetected(RuntimeError):
    def __init__(self, nodes):
        self.nodes = [int(v) for v in nodes]
        head = ", ".join(map(str, self.nodes[:10]))
        more = "..." if len(self.nodes) > 10 else ""
        super().__init__(f"greedy path never settles for {len(self.nodes)} node(s): {head}{more}")


@dataclass
class TrapMap:
    trap_of: np.ndarray  # -1 for unassigned
    path_len: np.ndarray  # -1 for unassigned
    candidates: list[int]
    cycles: list[int] = field(default_factory=list)

    @property
    def total_hops(self) -> int:
        return int(self.path_len[self.path_len > 0].sum())

    def to_dict(self) -> dict:
        return {"trap_of": [int(v) for v in self.trap_of], "candidates": list(self.candidates)}


@dataclass
class VectorFieldView:
    omega: np.ndarray  # (N, 2): (right - left, down - up)

    def to_list(self) -> list[list[float]]:
        return [[float(x), float(y)] for x, y in self.omega]


@dataclass
class MergeResult:
    candidates: list[int]
    trap_of: np.ndarray
    assignment: ClusterAssignment
    merges: list[tuple[int, int]] = field(default_factory=list)  # (absorbed, survivor)
    checked_pairs: int = 0


def next_hop(lattice: Lattice, fld: CorrelationField) -> np.ndarray:
    # argmax returns the first maximum: SELF, then UP, DOWN, LEFT, RIGHT
    best = np.argmax(fld.weights, axis=1)
    return lattice.neighbor_table[np.arange(lattice.node_count), best]


def greedy_paths(lattice: Lattice, fld: CorrelationField, fg_mask, strict: bool = True) -> TrapMap:
    """Hop every foreground node along its argmax slot until SELF wins.

    All paths advance in lockstep; a path still moving after ``node_count``
    hops has revisited a node.
    """
    if fld.lattice != lattice:
        raise LatticeMismatch("field does not belong to this lattice")
    n = lattice.node_count
    fg = np.asarray(fg_mask, dtype=bool)
    hop = next_hop(lattice, fld)
    nodes = np.flatnonzero(fg)
    pos = nodes.copy()
    hops = np.zeros(nodes.size, dtype=np.int64)
    active = np.flatnonzero(hop[pos] != pos)
    for _ in range(n):
        if active.size == 0:
            break
        pos[active] = hop[pos[active]]
        hops[active] += 1
        active = active[hop[pos[active]] != pos[active]]

    trap_of = np.full(n, -1, dtype=np.int64)
    path_len = np.full(n, -1, dtype=np.int64)
    cyc = nodes[active]
    ok = np.ones(nodes.size, dtype=bool)
    ok[active] = False
    trap_of[nodes[ok]] = pos[ok]
    path_len[nodes[ok]] = hops[ok]
    candidates = sorted(int(v) for v in np.unique(pos[ok]))
    trap_of[candidates] = candidates
    path_len[candidates] = 0
    if cyc.size and strict:
        raise CycleDetected(cyc)
    return TrapMap(trap_of, path_len, candidates, [int(v) for v in cyc])


def combined_vector_field(fld: CorrelationField) -> VectorFieldView:
    return VectorFieldView(fld.omega())


def chebyshev(lattice: Lattice, a: int, b: int) -> int:
    ra, ca = divmod(a, lattice.cols)
    rb, cb = divmod(b, lattice.cols)
    return max(abs(ra - rb), abs(ca - cb))


def _subgrid(lattice: Lattice, a: int, b: int, margin: int = 1) -> np.ndarray:
    ra, ca = divmod(a, lattice.cols)
    rb, cb = divmod(b, lattice.cols)
    r0, r1 = max(min(ra, rb) - margin, 0), min(max(ra, rb) + margin, lattice.rows - 1)
    c0, c1 = max(min(ca, cb) - margin, 0), min(max(ca, cb) + margin, lattice.cols - 1)
    rr, cc = np.meshgrid(np.arange(r0, r1 + 1), np.arange(c0, c1 + 1), indexing="ij")
    return rr * lattice.cols + cc


def local_cp_argmax(lattice: Lattice, fld: CorrelationField, a: int, b: int,
                    tol: float = DEFAULT_TOL) -> tuple[np.ndarray, np.ndarray]:
    """CP on the minimal sub-grid holding ``a`` and ``b`` (plus a one-node
    margin).  Returns the sub-grid node ids and each node's argmax center
    as a full-lattice id."""
    grid = _subgrid(lattice, a, b)
    rows, cols = grid.shape
    sub = Lattice.from_grid(rows, cols, lattice.factor)
    ids = grid.ravel()
    # links leaving the sub-grid are dropped and rows renormalized
    sub_field = field_from_weights(sub, fld.weights[ids])
    state, _, _ = cp_run(sub, sub_field, init_one_hot(sub), max_steps=4 * (sub.diameter + 1), tol=tol)
    local = extract_centers(state, np.ones(sub.node_count, dtype=bool)).center_of
    return ids, np.where(local >= 0, ids[local], -1)


def merge_close_candidates(lattice: Lattice, fld: CorrelationField, traps: TrapMap,
                           d_T: float = DEFAULT_DT) -> MergeResult:
    if d_T < 0:
        raise ValueError("d_T must be >= 0")
    parent = {c: c for c in traps.candidates}
    basin = {c: int(np.sum(traps.trap_of == c)) for c in traps.candidates}

    def find(c):
        while parent[c] != c:
            c = parent[c]
        return c

    merges = []
    checked = 0
    for a, b in itertools.combinations(traps.candidates, 2):
        if chebyshev(lattice, a, b) >= d_T:
            continue
        ra, rb = find(a), find(b)
        if ra == rb:
            continue
        checked += 1
        ids, centers = local_cp_argmax(lattice, fld, a, b)
        members = np.isin(traps.trap_of[ids], (a, b))
        if len(np.unique(centers[members])) != 1:
            continue
        keep, drop = (ra, rb) if (basin[ra], -ra) >= (basin[rb], -rb) else (rb, ra)
        parent[drop] = keep
        basin[keep] += basin[drop]
        merges.append((drop, keep))

    trap_of = traps.trap_of.copy()
    assigned = trap_of >= 0
    trap_of[assigned] = [find(int(t)) for t in trap_of[assigned]]
    fg_nodes = traps.path_len >= 0
    center_of = np.where(fg_nodes, trap_of, -1)
    candidates = sorted({find(c) for c in traps.candidates})
    return MergeResult(candidates, trap_of, ClusterAssignment.from_centers(center_of), merges, checked)


def gps_infer(lattice: Lattice, fld: CorrelationField, fg_mask, d_T: float = DEFAULT_DT,
              strict: bool = True) -> tuple[ClusterAssignment, TrapMap, MergeResult]:
    traps = greedy_paths(lattice, fld, fg_mask, strict=strict)
    merged = merge_close_candidates(lattice, fld, traps, d_T)
    # candidates reached only through background nodes are not foreground
    fg = np.asarray(fg_mask, dtype=bool)
    center_of = np.where(fg, merged.assignment.center_of, -1)
    return ClusterAssignment.from_centers(center_of), traps, merged
