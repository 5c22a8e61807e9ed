"""Multi-task loss, recursive ring-by-ring gradients of the center loss, a
finite-difference check, and a direct-logit gradient-descent trainer."""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .cp import ConfidenceState, cp_step, init_one_hot
from .gps import gps_infer
from .labels import SceneLabels
from .lattice import N_SLOTS, SELF, CorrelationField, Lattice, LatticeMismatch, normalize_field
from .synth import make_rng

log = logging.getLogger(__name__)

FLOOR_EPS = 1e-12


class CenterNotForeground(ValueError):
    pass


class DivergedLoss(FloatingPointError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace or []


class ShapeMismatch(ValueError):
    pass


# ---------------------------------------------------------------- centers

@dataclass
class CenterSet:
    centers: list[int]
    coverage: dict[int, np.ndarray]
    rings: dict[int, list[np.ndarray]]  # rings[j][k-1] = ring k inside coverage

    def max_ring(self, j: int) -> int:
        return len(self.rings[j])

    @property
    def touch_total(self) -> int:
        return sum(len(r) for rs in self.rings.values() for r in rs)


def center_set(lattice: Lattice, labels: SceneLabels) -> CenterSet:
    """Centers referenced by foreground labels, their coverage and Manhattan rings."""
    cover: dict[int, list[int]] = {}
    for i in np.flatnonzero(labels.fg_mask):
        for j in labels.center_labels[i]:
            cover.setdefault(j, []).append(int(i))
    rows, cols = np.divmod(np.arange(lattice.node_count), lattice.cols)
    centers = sorted(cover)
    coverage, rings = {}, {}
    for j in centers:
        nodes = np.array(sorted(cover[j]), dtype=np.int64)
        rj, cj = divmod(j, lattice.cols)
        dist = np.abs(rows[nodes] - rj) + np.abs(cols[nodes] - cj)
        k_max = int(dist.max()) if nodes.size else 0
        coverage[j] = nodes
        rings[j] = [nodes[dist == k] for k in range(1, k_max + 1)]
    return CenterSet(centers, coverage, rings)


# ---------------------------------------------------------------- losses

def smooth_l1(x):
    ax = np.abs(x)
    return np.where(ax < 1.0, 0.5 * x * x, ax - 0.5)


def smooth_l1_grad(x):
    return np.where(np.abs(x) < 1.0, x, np.sign(x))


def center_loss_from_values(labels: SceneLabels, values) -> np.ndarray:
    """Per-node cross-entropy of label weights against confidences, where
    ``values`` holds the confidence at each entry of ``labels.triples()``."""
    rows, _, m = labels.triples()
    terms = -m * np.log(np.maximum(np.asarray(values, dtype=np.float64), FLOOR_EPS))
    return np.bincount(rows, weights=terms, minlength=labels.lattice.node_count)


def center_loss(state_t: ConfidenceState, state_prev: ConfidenceState | None,
                labels: SceneLabels) -> tuple[np.ndarray, float]:
    if state_prev is not None and state_prev.step + 1 != state_t.step:
        raise ValueError("states are not consecutive steps")
    rows, cols, _ = labels.triples()
    values = np.asarray(state_t.conf[rows, cols]).ravel()
    per_node = center_loss_from_values(labels, values)
    return per_node, float(per_node.mean())


@dataclass
class LossReport:
    l_fg: float
    l_center: float
    l_box: float
    alpha: float
    beta: float
    total: float

    def row(self) -> list[float]:
        return [self.total, self.l_fg, self.l_center, self.l_box]


def box_residuals(box_preds, labels: SceneLabels) -> np.ndarray:
    """(N, 5) residuals: side distances in lattice units, angle in radians.
    Zero on background."""
    d = labels.lattice.factor
    r = np.zeros((labels.lattice.node_count, 5))
    fg = labels.fg_mask
    diff = np.asarray(box_preds, dtype=np.float64)[fg] - labels.box_targets[fg]
    diff[:, :4] /= d
    r[fg] = diff
    return r


def total_loss(fg_pred, center, box_preds, labels: SceneLabels, alpha: float = 1.0,
               beta: float = 1.0, lattice: Lattice | None = None) -> LossReport:
    """Mean per-node loss: foreground + alpha * center + beta * box (box
    terms on foreground nodes only).

    ``center`` is a ConfidenceState (its center loss is computed here) or an
    array of per-node center losses.
    """
    lattice = lattice or labels.lattice
    n = lattice.node_count
    fg_pred = np.asarray(fg_pred, dtype=np.float64)
    box_preds = np.asarray(box_preds, dtype=np.float64)
    if fg_pred.shape != (n, 2) or box_preds.shape != (n, 5) or labels.lattice != lattice:
        raise ShapeMismatch("predictions do not match the lattice")
    if isinstance(center, ConfidenceState):
        lc = center_loss(center, None, labels)[0]
    else:
        lc = np.asarray(center, dtype=np.float64)
        if lc.shape != (n,):
            raise ShapeMismatch("center loss does not match the lattice")
    fg = labels.fg_mask.astype(np.int64)
    lo = -np.log(np.maximum(fg_pred[np.arange(n), fg], FLOOR_EPS))
    lr = smooth_l1(box_residuals(box_preds, labels)).sum(axis=1)
    l_fg, l_c, l_r = lo.mean(), lc.mean(), (labels.fg_mask * lr).mean()
    return LossReport(float(l_fg), float(l_c), float(l_r), alpha, beta,
                      float(l_fg + alpha * l_c + beta * l_r))


# ---------------------------------------------------------------- recursive gradients

@dataclass
class CenterContribution:
    nodes: np.ndarray  # ring nodes in processing order
    conf: np.ndarray  # confidence in the center after the update
    grad_self: np.ndarray
    grad_neighbors: np.ndarray  # (n, 4) UP, DOWN, LEFT, RIGHT


@dataclass
class RecursiveGradients:
    confidences: dict[int, dict[int, float]]  # center -> {node: C_node(center)}
    grad: np.ndarray  # (N, 5) dL/ds, summed over nodes
    node_loss: np.ndarray
    touch_count: int
    contributions: dict[int, CenterContribution] = field(default_factory=dict)


def _center_pass(j: int, rings, weights, nb, labels: SceneLabels) -> CenterContribution:
    c = np.zeros(weights.shape[0])
    c[j] = 1.0  # one-hot initialization, entry j
    done_nodes, done_conf, done_self, done_nb = [], [], [], []
    for ring in rings:
        idx = nb[ring, 1:]
        prev_nb = np.where(idx >= 0, c[np.maximum(idx, 0)], 0.0)
        prev_self = c[ring]
        cur = (weights[ring, 1:] * prev_nb).sum(axis=1) + weights[ring, SELF] * prev_self
        c[ring] = cur
        m = np.array([labels.center_labels[i].get(j, 0.0) for i in ring])
        denom = np.maximum(cur, FLOOR_EPS)
        done_nodes.append(ring)
        done_conf.append(cur)
        done_self.append(-m * prev_self / denom)
        done_nb.append(-(m / denom)[:, None] * prev_nb)
    if not done_nodes:
        z = np.zeros(0, dtype=np.int64)
        return CenterContribution(z, np.zeros(0), np.zeros(0), np.zeros((0, 4)))
    return CenterContribution(np.concatenate(done_nodes), np.concatenate(done_conf),
                              np.concatenate(done_self), np.concatenate(done_nb))


def recursive_gradients(lattice: Lattice, fld: CorrelationField, labels: SceneLabels,
                        centers: CenterSet | None = None, threads: int = 1) -> RecursiveGradients:
    """Ring-by-ring confidences and center-loss gradients w.r.t. the field.

    Each center's rings are processed outward from the center; centers are
    applied in ascending id order, SELF gradients by assignment and neighbor
    gradients by accumulation.  Per-center passes are independent, so they
    may run on worker threads without changing the result.
    """
    if fld.lattice != lattice or labels.lattice != lattice:
        raise LatticeMismatch("field/labels do not belong to this lattice")
    centers = centers or center_set(lattice, labels)
    for j in centers.centers:
        if not labels.fg_mask[j]:
            raise CenterNotForeground(f"center {j} is a background node")
    w = fld.weights
    nb = lattice.neighbor_table

    def run(j):
        return _center_pass(j, centers.rings[j], w, nb, labels)

    if threads > 1 and len(centers.centers) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, centers.centers))
    else:
        parts = [run(j) for j in centers.centers]

    grad = np.zeros((lattice.node_count, N_SLOTS))
    with np.errstate(divide="ignore"):
        grad[:, SELF] = -1.0 / w[:, SELF]
    confidences: dict[int, dict[int, float]] = {}
    contributions = {}
    touch = 0
    for j, part in zip(centers.centers, parts):
        grad[part.nodes, SELF] = part.grad_self
        grad[part.nodes, 1:] += part.grad_neighbors
        confidences[j] = {int(i): float(v) for i, v in zip(part.nodes, part.conf)}
        contributions[j] = part
        touch += part.nodes.size
    grad[~lattice.slot_mask] = 0.0

    rows, cols, _ = labels.triples()
    # a node's own entry after one step is its self weight
    values = [w[i, SELF] if i == j else confidences.get(j, {}).get(i, 0.0)
              for i, j in zip(rows.tolist(), cols.tolist())]
    node_loss = center_loss_from_values(labels, values)
    return RecursiveGradients(confidences, grad, node_loss, touch, contributions)


def softmax_backward(weights: np.ndarray, grad_w: np.ndarray) -> np.ndarray:
    """Map per-node weight gradients through the (masked) softmax."""
    inner = (weights * grad_w).sum(axis=1, keepdims=True)
    return weights * (grad_w - inner)


def unrolled_center_loss(lattice: Lattice, logits, labels: SceneLabels, steps: int) -> float:
    fld = normalize_field(lattice, logits)
    state = init_one_hot(lattice, prune_eps=0.0)
    for _ in range(steps):
        state = cp_step(lattice, fld, state)
    return center_loss(state, None, labels)[1]


def finite_difference_grad(lattice: Lattice, logits, labels: SceneLabels, steps: int = 1,
                           h: float = 1e-6) -> np.ndarray:
    """Central differences of the mean center loss after ``steps`` full CP
    steps, with respect to every existing logit."""
    if steps < 1 or h <= 0:
        raise ValueError("steps >= 1 and h > 0 required")
    base = np.array(logits, dtype=np.float64)
    out = np.zeros_like(base)
    for i, s in zip(*np.nonzero(lattice.slot_mask)):
        plus, minus = base.copy(), base.copy()
        plus[i, s] += h
        minus[i, s] -= h
        out[i, s] = (unrolled_center_loss(lattice, plus, labels, steps)
                     - unrolled_center_loss(lattice, minus, labels, steps)) / (2 * h)
    return out


# ---------------------------------------------------------------- training

@dataclass
class TrainConfig:
    alpha: float = 1.0
    beta: float = 1.0
    lr: float = 0.5
    iters: int = 200
    seed: int = 0
    init_scale: float = 0.01
    threads: int = 1

    def __post_init__(self):
        if self.iters < 1:
            raise ValueError("iters must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")


@dataclass
class TrainResult:
    logits: np.ndarray
    fg_logits: np.ndarray
    geometry: np.ndarray  # (N, 5) pixel side distances + angle
    trace: list[LossReport]
    assignment: object
    field: CorrelationField

    @property
    def fg_prob(self) -> np.ndarray:
        return _softmax2(self.fg_logits)[:, 1]


def _softmax2(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def train(lattice: Lattice, labels: SceneLabels, config: TrainConfig | None = None) -> TrainResult:
    """Gradient descent on per-node field logits, fg logits and geometry.

    Gradients are those of the node-summed loss (the mean loss times
    ``node_count``), so ``lr`` acts as a per-node step size.  Geometry is
    optimized in lattice units (side distances divided by the factor).
    """
    cfg = config or TrainConfig()
    rng = make_rng(cfg.seed)
    n, d = lattice.node_count, lattice.factor
    z = rng.normal(0.0, cfg.init_scale, size=(n, N_SLOTS))
    fz = rng.normal(0.0, cfg.init_scale, size=(n, 2))
    geo = np.empty((n, 5))
    geo[:, :4] = 1.0 + rng.normal(0.0, cfg.init_scale, size=(n, 4))
    geo[:, 4] = rng.normal(0.0, cfg.init_scale, size=n)
    centers = center_set(lattice, labels)
    fg = labels.fg_mask
    onehot = np.stack([~fg, fg], axis=1).astype(np.float64)
    targets = np.where(fg[:, None], labels.box_targets, 0.0)
    targets[:, :4] /= d

    def to_pixels(g):
        out = g.copy()
        out[:, :4] *= d
        return out

    trace: list[LossReport] = []
    for it in range(cfg.iters + 1):
        fld = normalize_field(lattice, z)
        rg = recursive_gradients(lattice, fld, labels, centers, threads=cfg.threads)
        p = _softmax2(fz)
        with np.errstate(over="ignore", invalid="ignore"):
            rep = total_loss(p, rg.node_loss, to_pixels(geo), labels, cfg.alpha, cfg.beta,
                             lattice)
        trace.append(rep)
        if not np.isfinite(rep.total):
            raise DivergedLoss(f"non-finite loss at iteration {it}", trace)
        if it == cfg.iters:
            break
        dz = cfg.alpha * softmax_backward(fld.weights, rg.grad)
        dfz = p - onehot
        dgeo = cfg.beta * fg[:, None] * smooth_l1_grad(geo - targets)
        # a self weight that underflowed to 0 means the unfloored loss is infinite
        if not (np.all(np.isfinite(dz)) and np.all(np.isfinite(dgeo))):
            raise DivergedLoss(f"non-finite gradient at iteration {it}", trace)
        with np.errstate(invalid="ignore", over="ignore"):
            z = z - cfg.lr * dz
            fz = fz - cfg.lr * dfz
            geo = geo - cfg.lr * dgeo
        if not (np.all(np.isfinite(z)) and np.all(np.isfinite(geo))):
            raise DivergedLoss(f"non-finite parameters at iteration {it}", trace)

    fld = normalize_field(lattice, z)
    fg_pred = _softmax2(fz)[:, 1] > 0.5
    assignment, _, _ = gps_infer(lattice, fld, fg_pred, strict=False)
    return TrainResult(z, fz, to_pixels(geo), trace, assignment, fld)
