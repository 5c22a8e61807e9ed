"""Markov Clustering baseline over the lattice flow graph.

Column ``n`` of the flow matrix is the one-step transition distribution of a
walk leaving node ``n``.  Each iteration expands by right-multiplying the
fixed base matrix, renormalizes columns (inflate) and zeroes entries below
the threshold (prune).  Iteration 1 inflates and prunes the base matrix, so
``iters`` iterations perform ``iters - 1`` expansions.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp

from .cp import ClusterAssignment, _row_argmax, transition_operator
from .lattice import CorrelationField, Lattice

FLOOR_EPS = 1e-12
DEFAULT_PRUNE = 1e-4
DEFAULT_MAX_ITERS = 50
DEFAULT_TOL = 1e-9


class AllPruned(RuntimeError):
    pass


@dataclass
class FlowMatrix:
    m: sp.csc_matrix

    @property
    def size(self) -> int:
        return self.m.shape[0]

    @property
    def nnz(self) -> int:
        return self.m.nnz

    def dense(self) -> np.ndarray:
        return self.m.toarray()

    @classmethod
    def from_dense(cls, a) -> "FlowMatrix":
        m = sp.csc_matrix(np.asarray(a, dtype=np.float64))
        m.sort_indices()
        return cls(m)

    def to_coo_text(self) -> str:
        """'m n value' lines sorted by (n, m)."""
        coo = self.m.tocoo()
        order = np.lexsort((coo.row, coo.col))
        return "".join(f"{coo.row[k]} {coo.col[k]} {float(coo.data[k])!r}\n" for k in order)


@dataclass
class McCounters:
    expand_flops: int = 0
    inflate_ops: int = 0
    pruned_entries: int = 0
    iterations: int = 0
    peak_nnz: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class McStep:
    expanded: sp.csc_matrix | None  # None on the first iteration
    inflated: sp.csc_matrix
    pruned: sp.csc_matrix


@dataclass
class McResult:
    flow: FlowMatrix
    counters: McCounters
    steps: list[McStep] = field(default_factory=list)
    converged: bool = False


def build_flow_matrix(lattice: Lattice, fld: CorrelationField) -> FlowMatrix:
    m = transition_operator(lattice, fld).T.tocsc()
    m.eliminate_zeros()  # zero-weight links are not edges
    return FlowMatrix(inflate(m))


def inflate(m: sp.csc_matrix) -> sp.csc_matrix:
    """Divide every column by its sum; empty columns stay empty."""
    m = m.tocsc(copy=True)
    sums = np.asarray(m.sum(axis=0)).ravel()
    m.data /= np.repeat(np.where(sums > 0, sums, 1.0), np.diff(m.indptr))
    return m


def prune(m: sp.csc_matrix, threshold: float) -> tuple[sp.csc_matrix, int]:
    m = m.copy()
    drop = m.data < threshold
    m.data[drop] = 0.0
    m.eliminate_zeros()
    m.sort_indices()
    return m, int(drop.sum())


def expand_flop_count(left: sp.csc_matrix, right: sp.csc_matrix) -> int:
    """Scalar multiply-adds of a sparse product: for every k,
    nnz(left[:, k]) * nnz(right[k, :])."""
    col_nnz = np.diff(left.indptr)
    row_nnz = np.bincount(right.indices, minlength=right.shape[0])
    return int(col_nnz @ row_nnz)


def _check_columns(m: sp.csc_matrix, t: int):
    empty = np.flatnonzero(np.diff(m.indptr) == 0)
    if empty.size:
        raise AllPruned(f"iteration {t}: column(s) {empty[:10].tolist()} pruned to zero")


def _max_change(a: sp.csc_matrix, b: sp.csc_matrix) -> float:
    diff = a - b
    return float(np.abs(diff.data).max()) if diff.nnz else 0.0


def _forward(m0: FlowMatrix, iters: int, threshold: float, tol: float | None,
             keep_steps: bool) -> McResult:
    base = m0.m.tocsc()
    base.sort_indices()
    c = McCounters()
    steps = []
    inflated = inflate(base)
    c.inflate_ops += inflated.nnz
    cur, dropped = prune(inflated, threshold)
    c.pruned_entries += dropped
    c.iterations = 1
    c.peak_nnz = max(base.nnz, inflated.nnz)
    _check_columns(cur, 1)
    if keep_steps:
        steps.append(McStep(None, inflated, cur))
    # convergence needs at least one expansion to compare against
    converged = False
    for t in range(2, iters + 1):
        if converged:
            break
        c.expand_flops += expand_flop_count(cur, base)
        expanded = (cur @ base).tocsc()
        expanded.sort_indices()
        c.peak_nnz = max(c.peak_nnz, expanded.nnz)
        inflated = inflate(expanded)
        c.inflate_ops += inflated.nnz
        nxt, dropped = prune(inflated, threshold)
        c.pruned_entries += dropped
        c.iterations = t
        _check_columns(nxt, t)
        if keep_steps:
            steps.append(McStep(expanded, inflated, nxt))
        converged = tol is not None and _max_change(nxt, cur) <= tol
        cur = nxt
    return McResult(FlowMatrix(cur), c, steps, converged)


def mc_iterate(m0: FlowMatrix, max_iters: int = DEFAULT_MAX_ITERS,
               prune_threshold: float = DEFAULT_PRUNE, tol: float = DEFAULT_TOL,
               keep_steps: bool = False) -> McResult:
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    if not 0 <= prune_threshold < 1:
        raise ValueError("prune_threshold must lie in [0, 1)")
    if tol < 0:
        raise ValueError("tol must be >= 0")
    return _forward(m0, max_iters, prune_threshold, tol, keep_steps)


def mc_clusters(mN: FlowMatrix) -> ClusterAssignment:
    """Each node joins the attractor holding the largest entry of its column."""
    attractor, _ = _row_argmax(mN.m.T.tocsr())
    return ClusterAssignment.from_centers(attractor)


@dataclass
class FlowLabels:
    targets: list[dict[int, float]]  # per column: attractor -> probability

    @classmethod
    def one_hot(cls, attractors) -> "FlowLabels":
        return cls([{int(a): 1.0} for a in attractors])


def _label_arrays(labels: FlowLabels):
    cols, rows, vals = [], [], []
    for n, t in enumerate(labels.targets):
        for r, y in t.items():
            if y:
                cols.append(n)
                rows.append(r)
                vals.append(y)
    return np.array(rows, dtype=np.int64), np.array(cols, dtype=np.int64), np.array(vals)


def mc_loss(mN: FlowMatrix, labels: FlowLabels) -> float:
    if len(labels.targets) != mN.size:
        raise ValueError("labels do not match the flow matrix")
    rows, cols, y = _label_arrays(labels)
    vals = np.asarray(mN.m[rows, cols]).ravel() if rows.size else np.zeros(0)
    return float(np.sum(-y * np.log(np.maximum(vals, FLOOR_EPS))) / mN.size)


def mc_gradients(m0: FlowMatrix, labels: FlowLabels, iters: int,
                 prune_threshold: float = DEFAULT_PRUNE) -> np.ndarray:
    """Dense gradient of the flow loss with respect to the base matrix, by
    the backward recurrence with a 0/1 prune gate on kept entries and an
    identity inflate derivative."""
    if iters < 1:
        raise ValueError("iters must be >= 1")
    res = _forward(m0, iters, prune_threshold, None, keep_steps=True)
    n = m0.size
    base = m0.m.toarray()
    out = res.steps[-1].pruned.toarray()
    rows, cols, y = _label_arrays(labels)
    g = np.zeros((n, n))
    np.add.at(g, (rows, cols), -y / np.maximum(out[rows, cols], FLOOR_EPS) / n)
    g_m0 = np.zeros((n, n))
    for t in range(len(res.steps) - 1, 0, -1):
        step = res.steps[t]
        g_e = g * (step.pruned.toarray() > 0)  # prune gate, then identity inflate
        prev = res.steps[t - 1].pruned.toarray()
        g_m0 += g_e @ prev.T
        g = base.T @ g_e
    g_m0 += g * (res.steps[0].pruned.toarray() > 0)
    return g_m0
