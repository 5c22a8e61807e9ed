"""Forward Correlation Propagation.

A confidence state stores, for each node, a sparse distribution of
confidence over candidate center nodes.  Rows of a CSR matrix hold
the per-node maps, so one update of every node is a single product of the
sparse transition operator with the previous state.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .lattice import N_SLOTS, CorrelationField, Lattice, LatticeMismatch

DEFAULT_PRUNE_EPS = 1e-6
DEFAULT_TOL = 1e-6


@dataclass(frozen=True, eq=False)
class ConfidenceState:
    lattice: Lattice
    conf: sp.csr_matrix
    step: int = 0
    prune_eps: float = DEFAULT_PRUNE_EPS

    def node(self, i: int) -> dict[int, float]:
        lo, hi = self.conf.indptr[i], self.conf.indptr[i + 1]
        return {int(j): float(v) for j, v in zip(self.conf.indices[lo:hi], self.conf.data[lo:hi])}

    def support_sizes(self) -> np.ndarray:
        return np.diff(self.conf.indptr)

    def total_mass(self) -> float:
        return float(self.conf.data.sum())

    def dense(self) -> np.ndarray:
        return self.conf.toarray()

    @classmethod
    def from_maps(cls, lattice: Lattice, maps, step: int = 0, prune_eps: float = DEFAULT_PRUNE_EPS):
        n = lattice.node_count
        if len(maps) != n:
            raise LatticeMismatch(f"{len(maps)} node maps for {n} nodes")
        rows, cols, vals = [], [], []
        for i, m in enumerate(maps):
            for j, v in m.items():
                rows.append(i)
                cols.append(j)
                vals.append(v)
        conf = sp.csr_matrix((vals, (rows, cols)), shape=(n, n), dtype=np.float64)
        return cls(lattice, _prune(conf, prune_eps), step, prune_eps)


@dataclass
class ClusterAssignment:
    center_of: np.ndarray  # int per node, -1 = unassigned
    clusters: dict[int, list[int]] = field(default_factory=dict)

    @classmethod
    def from_centers(cls, center_of) -> "ClusterAssignment":
        center_of = np.asarray(center_of, dtype=np.int64)
        clusters: dict[int, list[int]] = {}
        for node in np.flatnonzero(center_of >= 0):
            clusters.setdefault(int(center_of[node]), []).append(int(node))
        return cls(center_of, dict(sorted(clusters.items())))

    def agreement(self, other: "ClusterAssignment", mask) -> float:
        """Fraction of masked nodes assigned to the same center in both."""
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            return 1.0
        return float(np.mean(self.center_of[mask] == other.center_of[mask]))


def _prune(conf: sp.csr_matrix, eps: float) -> sp.csr_matrix:
    conf.data[conf.data <= eps] = 0.0
    conf.eliminate_zeros()
    conf.sort_indices()
    return conf


def init_one_hot(lattice: Lattice, prune_eps: float = DEFAULT_PRUNE_EPS) -> ConfidenceState:
    conf = sp.identity(lattice.node_count, dtype=np.float64, format="csr")
    return ConfidenceState(lattice, conf, 0, prune_eps)


def transition_operator(lattice: Lattice, fld: CorrelationField) -> sp.csr_matrix:
    """Sparse (N, N) operator ``A`` with ``C^t = A @ C^{t-1}``.

    ``A[i, n]`` is the weight node ``i`` assigns to neighbor ``n`` (or to
    itself for ``n == i``).
    """
    _check_field(lattice, fld)
    nb = lattice.neighbor_table
    ok = nb >= 0
    rows = np.broadcast_to(np.arange(lattice.node_count)[:, None], nb.shape)[ok]
    A = sp.csr_matrix(
        (fld.weights[ok], (rows, nb[ok])),
        shape=(lattice.node_count, lattice.node_count),
    )
    A.sort_indices()
    return A


def _check_field(lattice: Lattice, fld: CorrelationField):
    if fld.lattice != lattice or fld.weights.shape != (lattice.node_count, N_SLOTS):
        raise LatticeMismatch("field does not belong to this lattice")


def _check_state(lattice: Lattice, state: ConfidenceState):
    if state.lattice != lattice or state.conf.shape != (lattice.node_count,) * 2:
        raise LatticeMismatch("state does not belong to this lattice")


def _advance(A: sp.csr_matrix, state: ConfidenceState) -> ConfidenceState:
    conf = _prune((A @ state.conf).tocsr(), state.prune_eps)
    return ConfidenceState(state.lattice, conf, state.step + 1, state.prune_eps)


def cp_step(lattice: Lattice, fld: CorrelationField, state: ConfidenceState) -> ConfidenceState:
    """One synchronous update of every node; ``state`` is left untouched."""
    _check_state(lattice, state)
    return _advance(transition_operator(lattice, fld), state)


def _max_change(a: sp.csr_matrix, b: sp.csr_matrix) -> float:
    d = a - b
    return float(np.abs(d.data).max()) if d.nnz else 0.0


def cp_run(lattice: Lattice, fld: CorrelationField, init: ConfidenceState,
           max_steps: int, tol: float = DEFAULT_TOL):
    """Iterate until the largest per-entry change is ``<= tol``.

    Returns ``(state, steps_used, update_count)``.
    """
    if max_steps < 1:
        raise ValueError("max_steps must be >= 1")
    if tol < 0:
        raise ValueError("tol must be >= 0")
    _check_state(lattice, init)
    A = transition_operator(lattice, fld)
    state = init
    steps = 0
    while steps < max_steps:
        nxt = _advance(A, state)
        steps += 1
        done = _max_change(nxt.conf, state.conf) <= tol
        state = nxt
        if done:
            break
    return state, steps, steps * lattice.node_count


def dense_transition_matrix(lattice: Lattice, fld: CorrelationField) -> np.ndarray:
    """Dense oracle of the update, filled node by node from the neighbor list."""
    n = lattice.node_count
    M = np.zeros((n, n))
    for i in range(n):
        M[i, i] = fld.weights[i, 0]
        for slot, j in lattice.neighbors(i):
            M[i, j] = fld.weights[i, slot]
    return M


def _row_argmax(conf: sp.csr_matrix) -> tuple[np.ndarray, np.ndarray]:
    """Per row: (argmax column, max value); ties go to the smallest column.
    Empty rows give (-1, 0)."""
    n = conf.shape[0]
    arg = np.full(n, -1, dtype=np.int64)
    best = np.zeros(n)
    counts = np.diff(conf.indptr)
    nonempty = np.flatnonzero(counts)
    if nonempty.size == 0:
        return arg, best
    starts = conf.indptr[nonempty]
    best[nonempty] = np.maximum.reduceat(conf.data, starts)
    # first hit of the row maximum; indices are sorted within each row
    row_of = np.repeat(np.arange(n), counts)
    hit = conf.data == best[row_of]
    cols = np.where(hit, conf.indices.astype(np.int64), np.iinfo(np.int64).max)
    arg[nonempty] = np.minimum.reduceat(cols, starts)
    return arg, best


def extract_centers(state: ConfidenceState, fg_mask, min_conf: float = 0.0) -> ClusterAssignment:
    fg = np.asarray(fg_mask, dtype=bool)
    if fg.shape != (state.lattice.node_count,):
        raise LatticeMismatch("mask does not match lattice")
    arg, best = _row_argmax(state.conf)
    center_of = np.where(fg & (arg >= 0) & (best >= min_conf), arg, -1)
    return ClusterAssignment.from_centers(center_of)


def selective_sum(state: ConfidenceState, tracked) -> np.ndarray:
    """Per-node confidence mass on the tracked center columns."""
    tracked = np.asarray(sorted(set(int(t) for t in tracked)), dtype=np.int64)
    if tracked.size == 0:
        return np.zeros(state.lattice.node_count)
    return np.asarray(state.conf[:, tracked].sum(axis=1)).ravel()


def heatmap_pgm(state: ConfidenceState, tracked) -> bytes:
    """Binary PGM (P5), one byte per node."""
    lat = state.lattice
    vals = np.clip(np.round(255.0 * selective_sum(state, tracked)), 0, 255).astype(np.uint8)
    header = f"P5\n{lat.cols} {lat.rows}\n255\n".encode("ascii")
    return header + vals.reshape(lat.rows, lat.cols).tobytes()
