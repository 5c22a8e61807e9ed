import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from latticeprop.cp import ConfidenceState, cp_step, init_one_hot
from latticeprop.geometry import OrientedBox
from latticeprop.labels import BoxOutOfBounds, label_scene
from latticeprop.lattice import RIGHT, SELF, Lattice, field_from_weights, normalize_field
from latticeprop.learn import (CenterNotForeground, DivergedLoss, ShapeMismatch, TrainConfig,
                               center_loss, center_set, finite_difference_grad,
                               recursive_gradients, smooth_l1, softmax_backward, total_loss,
                               train)

from builders import exact_one_step_instance, make_labels
from oracles import dense_operator, manhattan_rings, restricted_replay

# 0.5 ln 2 + 0.5 ln 4, scalar recomputation
TWO_LABEL_LOSS = 1.0397207708399179


def brute_coverage(lat, box):
    """Point-in-rectangle by explicit inequalities in the box frame."""
    out = []
    c, s = math.cos(box.angle), math.sin(box.angle)
    for n in range(lat.node_count):
        r, col = divmod(n, lat.cols)
        x, y = (col + 0.5) * lat.factor - box.cx, (r + 0.5) * lat.factor - box.cy
        u, v = x * c + y * s, -x * s + y * c
        if abs(u) <= box.w / 2 + 1e-9 and abs(v) <= box.h / 2 + 1e-9:
            out.append(n)
    return out


# ---------------------------------------------------------------- labels

def test_label_block_of_nine():
    lat = Lattice(80, 80, 16)
    box = OrientedBox(40, 40, 48, 48, 0.0)
    labels = label_scene(lat, [box])
    block = brute_coverage(lat, box)
    assert block == [6, 7, 8, 11, 12, 13, 16, 17, 18]
    assert np.flatnonzero(labels.fg_mask).tolist() == block
    assert all(labels.center_labels[i] == {12: 1.0} for i in block)
    assert labels.centers == [12]


def test_label_two_overlapping_boxes():
    lat = Lattice(48, 96, 16)
    a = OrientedBox(32, 24, 48, 48, 0.0)
    b = OrientedBox(64, 24, 48, 48, 0.0)
    labels = label_scene(lat, [a, b])
    ca, cb = labels.box_centers
    shared = set(brute_coverage(lat, a)) & set(brute_coverage(lat, b))
    assert shared
    for i in shared:
        assert labels.center_labels[i] == {min(ca, cb): 0.5, max(ca, cb): 0.5}
    for i in np.flatnonzero(labels.fg_mask):
        assert sum(labels.center_labels[i].values()) == pytest.approx(1.0, abs=0)
        assert all(labels.fg_mask[j] for j in labels.center_labels[i])


def test_label_empty_scene_and_errors(caplog):
    lat = Lattice(48, 48, 16)
    labels = label_scene(lat, [])
    assert not labels.fg_mask.any()
    assert labels.center_labels == [{i: 1.0} for i in range(9)]
    with pytest.raises(BoxOutOfBounds):
        label_scene(lat, [OrientedBox(40, 40, 30, 10, 0.0)])
    tiny = OrientedBox(16, 16, 2, 2, 0.0)  # between node centers
    labels = label_scene(lat, [tiny])
    assert labels.skipped == [0] and not labels.fg_mask.any()
    assert "EmptyBox" in caplog.text


# ---------------------------------------------------------------- losses

def test_center_loss_examples():
    lat = Lattice.from_grid(1, 3)
    labels = make_labels(lat, {1: [0]})
    labels.center_labels[2] = {0: 0.5, 1: 0.5}
    s = ConfidenceState.from_maps(lat, [{1: 0.5}, {1: 1.0}, {0: 0.5, 1: 0.25}], step=1)
    per_node, mean = center_loss(s, None, labels)
    assert per_node[1] == 0.0
    assert per_node[0] == pytest.approx(math.log(2), rel=1e-15)
    assert per_node[2] == pytest.approx(TWO_LABEL_LOSS, rel=1e-14)
    assert mean == pytest.approx(per_node.sum() / 3, rel=1e-15)
    with pytest.raises(ValueError):
        center_loss(s, ConfidenceState.from_maps(lat, [{0: 1}, {1: 1}, {2: 1}], step=3), labels)


def test_smooth_l1_values():
    assert smooth_l1(0.5) == 0.125
    assert smooth_l1(2.0) == 1.5
    assert smooth_l1(-2.0) == 1.5


def test_total_loss_examples():
    lat = Lattice(48, 48, 16)
    box = OrientedBox(24, 24, 40, 40, 0.2)
    labels = label_scene(lat, [box])
    n = lat.node_count
    fg = labels.fg_mask
    perfect_fg = np.stack([~fg, fg], axis=1).astype(float)
    state = ConfidenceState.from_maps(lat, [{max(m, key=m.get): 1.0} for m in labels.center_labels])
    preds = np.where(fg[:, None], labels.box_targets, 0.0)
    rep = total_loss(perfect_fg, state, preds, labels)
    assert rep.total == 0.0

    rng = np.random.default_rng(0)
    p = rng.uniform(0.05, 0.95, size=n)
    fg_pred = np.stack([1 - p, p], axis=1)
    lc = rng.uniform(0, 2, size=n)
    box_preds = preds + rng.normal(0, 20, size=(n, 5))
    only_fg = total_loss(fg_pred, lc, box_preds, labels, alpha=0.0, beta=0.0)
    lo = [-math.log(fg_pred[i, int(fg[i])]) for i in range(n)]
    assert only_fg.total == pytest.approx(sum(lo) / n, rel=1e-14)

    rep = total_loss(fg_pred, lc, box_preds, labels, alpha=0.7, beta=1.3)
    lr = 0.0
    for i in np.flatnonzero(fg):
        res = list((box_preds[i, :4] - labels.box_targets[i, :4]) / 16) + [
            box_preds[i, 4] - labels.box_targets[i, 4]]
        lr += sum(0.5 * x * x if abs(x) < 1 else abs(x) - 0.5 for x in res)
    assert rep.l_box == pytest.approx(lr / n, rel=1e-12)
    assert rep.total == pytest.approx(rep.l_fg + 0.7 * rep.l_center + 1.3 * rep.l_box, rel=1e-15)
    assert min(rep.l_fg, rep.l_center, rep.l_box) >= 0
    with pytest.raises(ShapeMismatch):
        total_loss(fg_pred[:-1], lc, box_preds, labels)


# ---------------------------------------------------------------- recursive gradients

def test_pair_gradient_example():
    lat = Lattice.from_grid(1, 2)
    labels = make_labels(lat, {1: [0]})
    fld = field_from_weights(lat, [[0.5, 0, 0, 0, 0.5], [0.5, 0, 0, 0.5, 0]])
    rg = recursive_gradients(lat, fld, labels)
    assert rg.confidences[1] == {0: 0.5}
    assert rg.grad[0, RIGHT] == -2.0
    # finite differences of -ln C_0^1(1) in the weight itself
    h = 1e-6
    w = np.array(fld.weights)

    def loss(v):
        ww = w.copy()
        ww[0, RIGHT] = v
        return -math.log(dense_operator(1, 2, ww)[0, 1])

    fd = (loss(0.5 + h) - loss(0.5 - h)) / (2 * h)
    assert fd == pytest.approx(-2.0, rel=1e-8)


def test_zero_label_weight_gives_no_neighbor_gradient():
    lat = Lattice.from_grid(1, 3)
    labels = make_labels(lat, {1: [0]})
    labels.center_labels[0] = {1: 0.0, 0: 1.0}  # tracked but weightless
    labels._triples = None
    fld = normalize_field(lat, np.zeros((3, 5)))
    rg = recursive_gradients(lat, fld, labels)
    assert np.all(rg.grad[0, 1:] == 0.0)


def test_touch_count_block():
    lat = Lattice(80, 80, 16)
    labels = label_scene(lat, [OrientedBox(40, 40, 48, 48, 0.0)])
    fld = normalize_field(lat, np.zeros((25, 5)))
    rg = recursive_gradients(lat, fld, labels)
    rings = manhattan_rings(5, 5, 12, labels.coverage(12))
    assert rg.touch_count == 8 == sum(len(r) for r in rings.values())
    assert {k: len(v) for k, v in rings.items()} == {1: 4, 2: 4}
    cs = center_set(lat, labels)
    assert cs.max_ring(12) == 2


def test_center_not_foreground():
    lat = Lattice.from_grid(1, 3)
    labels = make_labels(lat, {1: [0]})
    labels.fg_mask[1] = False
    with pytest.raises(CenterNotForeground):
        recursive_gradients(lat, normalize_field(lat, np.zeros((3, 5))), labels)


@given(st.integers(0, 2**32 - 1))
def test_one_step_exactness(seed):
    lat, labels, z = exact_one_step_instance(np.random.default_rng(seed))
    fld = normalize_field(lat, z)
    rg = recursive_gradients(lat, fld, labels)
    analytic = softmax_backward(fld.weights, rg.grad) / lat.node_count
    fd = finite_difference_grad(lat, z, labels, steps=1, h=1e-6)
    mask = np.abs(fd) > 1e-7
    assert np.all(np.abs(analytic[mask] - fd[mask]) <= 1e-4 * np.abs(fd[mask]))
    assert np.all(np.abs(analytic[~mask]) <= 1e-6)
    # node loss agrees with a full CP step
    s1 = cp_step(lat, fld, init_one_hot(lat, 0.0))
    assert rg.node_loss == pytest.approx(center_loss(s1, None, labels)[0], rel=1e-12)


@given(st.integers(0, 2**32 - 1))
def test_gradient_field_properties(seed):
    rng = np.random.default_rng(seed)
    rows, cols = (int(v) for v in rng.integers(5, 10, size=2))
    lat = Lattice(rows * 8, cols * 8, 8)
    boxes = [OrientedBox(rng.uniform(20, cols * 8 - 20), rng.uniform(20, rows * 8 - 20),
                         24, 16, rng.uniform(-1, 1))]
    boxes = [b for b in boxes if all(0 <= x <= cols * 8 and 0 <= y <= rows * 8
                                     for x, y in b.corners())]
    labels = label_scene(lat, boxes)
    fld = normalize_field(lat, rng.normal(size=(lat.node_count, 5)))
    rg = recursive_gradients(lat, fld, labels)
    assert np.all(rg.grad[~lat.slot_mask] == 0.0)
    assert np.all(np.isfinite(rg.grad))
    expected = sum(len(v) for j in labels.centers
                   for v in manhattan_rings(rows, cols, j, labels.coverage(j)).values())
    assert rg.touch_count == expected


def test_ring_values_match_restricted_replay():
    lat = Lattice(160, 160, 16)
    labels = label_scene(lat, [OrientedBox(80, 72, 100, 40, 0.5)])
    z = np.random.default_rng(4).normal(size=(lat.node_count, 5))
    fld = normalize_field(lat, z)
    rg = recursive_gradients(lat, fld, labels)
    (j,) = labels.centers
    members = labels.coverage(j)
    rings = manhattan_rings(10, 10, j, members)
    replay = restricted_replay(10, 10, fld.weights, j, members, max(rings))
    for k, nodes in rings.items():
        for i in nodes:
            assert abs(rg.confidences[j][i] - replay[k][i]) <= 1e-10


def test_threads_do_not_change_gradients():
    lat = Lattice(256, 256, 16)
    boxes = [OrientedBox(60, 60, 80, 40, 0.3), OrientedBox(180, 180, 90, 30, -0.6),
             OrientedBox(100, 90, 60, 40, 0.1)]
    labels = label_scene(lat, boxes)
    fld = normalize_field(lat, np.random.default_rng(1).normal(size=(lat.node_count, 5)))
    a = recursive_gradients(lat, fld, labels, threads=1)
    b = recursive_gradients(lat, fld, labels, threads=4)
    assert np.array_equal(a.grad, b.grad)
    assert np.array_equal(a.node_loss, b.node_loss)


# ---------------------------------------------------------------- finite differences

def test_fd_self_centered_sign():
    lat = Lattice.from_grid(3, 3)
    labels = make_labels(lat, {})
    z = np.random.default_rng(2).normal(size=(9, 5))
    g = finite_difference_grad(lat, z, labels)
    assert np.all(g[:, SELF] <= 0)
    w = normalize_field(lat, z).weights
    expected = (w - np.eye(5)[SELF]) * lat.slot_mask / 9
    assert np.allclose(g, expected, atol=1e-8)


def test_fd_step_size_consistency():
    lat = Lattice.from_grid(3, 3)
    labels = make_labels(lat, {4: [1, 3, 5, 7, 0]})
    z = np.random.default_rng(5).normal(size=(9, 5))
    a = finite_difference_grad(lat, z, labels, steps=2, h=1e-6)
    b = finite_difference_grad(lat, z, labels, steps=2, h=1e-7)
    mask = np.abs(a) > 1e-6
    assert np.all(np.abs(a[mask] - b[mask]) <= 1e-4 * np.abs(a[mask]))
    with pytest.raises(ValueError):
        finite_difference_grad(lat, z, labels, steps=0)


# ---------------------------------------------------------------- training

def one_box_scene():
    lat = Lattice(160, 160, 16)
    return lat, label_scene(lat, [OrientedBox(88, 72, 48, 48, 0.0)])


def test_train_one_box():
    lat, labels = one_box_scene()
    res = train(lat, labels, TrainConfig(iters=200, lr=0.5))
    assert res.trace[-1].total < 0.5 * res.trace[0].total
    assert len(res.trace) == 201
    assert set(res.assignment.clusters) == set(labels.centers)


def test_train_zero_lr_and_determinism():
    lat, labels = one_box_scene()
    res = train(lat, labels, TrainConfig(iters=10, lr=0.0, seed=3))
    totals = [r.total for r in res.trace]
    assert totals == [totals[0]] * 11
    again = train(lat, labels, TrainConfig(iters=10, lr=0.0, seed=3))
    assert np.array_equal(res.logits, again.logits)
    a = train(lat, labels, TrainConfig(iters=20, seed=7))
    b = train(lat, labels, TrainConfig(iters=20, seed=7, threads=3))
    assert [r.row() for r in a.trace] == [r.row() for r in b.trace]


def test_train_validation_and_divergence():
    with pytest.raises(ValueError):
        TrainConfig(iters=0)
    with pytest.raises(ValueError):
        TrainConfig(lr=-1)
    lat, labels = one_box_scene()
    with pytest.raises(DivergedLoss) as info:
        train(lat, labels, TrainConfig(iters=5, lr=float("inf")))
    assert len(info.value.trace) >= 1
