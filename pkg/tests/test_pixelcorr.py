import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stcl import diffcore as dc
from stcl.diffcore import Tensor, finite_diff_check
from stcl.errors import DimensionError, LabelError, StateError
from stcl.matching import OVER_COLS, OVER_ROWS, AffinityMatrix, FeatureGrid
from stcl.pixelcorr import (AnchorSet, PseudoLabels, ViewMap, anchor_affinity, crop_side, cross_view_anchor,
                            pcl_loss, pseudo_labels, sample_anchor_grid)

seeds = st.integers(0, 2 ** 31 - 1)


def rand_grid(rng, c, h, w, scale=1.0):
    return FeatureGrid.from_array(rng.normal(0, scale, size=(c, h, w)))


def test_anchor_grid_one_per_cell():
    g = FeatureGrid.from_array(np.zeros((2, 64, 64)))
    a = sample_anchor_grid(g, (8, 8), rng_seed=3)
    assert len(a) == 64 and a.grid == (8, 8) and a.features.shape == (2, 64)
    rows, cols = np.divmod(a.positions, 64)
    cells = sorted(zip((rows // 8).tolist(), (cols // 8).tolist()))
    assert cells == [(r, c) for r in range(8) for c in range(8)]


@settings(max_examples=40, deadline=None)
@given(seeds, st.integers(1, 6), st.integers(1, 6), st.integers(6, 13), st.integers(6, 13))
def test_anchor_grid_partitions_lattice(seed, rows, cols, h, w):
    g = FeatureGrid.from_array(np.zeros((1, h, w)))
    a = sample_anchor_grid(g, (rows, cols), rng_seed=seed)
    assert len(set(a.positions.tolist())) == rows * cols
    ys = (np.arange(rows + 1) * h) // rows
    xs = (np.arange(cols + 1) * w) // cols
    r, c = np.divmod(a.positions, w)
    for k, (y, x) in enumerate(zip(r, c)):
        cr, cc = divmod(k, cols)
        assert ys[cr] <= y < ys[cr + 1] and xs[cc] <= x < xs[cc + 1]


def test_anchor_grid_exhaustive_and_deterministic():
    rng = np.random.default_rng(0)
    g = rand_grid(rng, 3, 4, 5)
    a = sample_anchor_grid(g, (4, 5), rng_seed=1)
    assert np.array_equal(a.positions, np.arange(20))
    b1, b2 = sample_anchor_grid(g, (2, 2), 7), sample_anchor_grid(g, (2, 2), 7)
    assert np.array_equal(b1.positions, b2.positions)
    with pytest.raises(DimensionError):
        sample_anchor_grid(g, (5, 5))


def test_anchor_grid_stride_mode():
    g = FeatureGrid.from_array(np.zeros((1, 16, 16)))
    a = sample_anchor_grid(g, (8, 8), rng_seed=0, grid_mode="stride")
    assert len(a) == 4 and a.grid == (2, 2)


def test_view_maps():
    flip = ViewMap(0, 0, 10, 8, True)
    assert flip.to_source(np.array([0, 9]), np.array([3, 3]))[0].tolist() == [9, 0]
    ident = ViewMap(0, 0, 10, 8, False)
    xs, ys = ident.to_source(np.arange(10), np.arange(10) % 8)
    assert np.array_equal(xs, np.arange(10)) and np.array_equal(ys, np.arange(10) % 8)
    m = ViewMap(4, 8, 20, 16, True)
    x, y = np.array([0, 5, 19]), np.array([0, 7, 15])
    bx, by = m.from_source(*m.to_source(x, y))
    assert np.array_equal(bx, x) and np.array_equal(by, y)


def test_crop_side_rounding():
    # sqrt(0.6) * 64 = 49.57 -> nearest multiple of 4 is 48
    assert crop_side(64, 0.6) == 48
    assert crop_side(64, 1.0) == 64
    assert crop_side(64, 1e-6) == 4


@settings(max_examples=30, deadline=None)
@given(seeds)
def test_cross_view_is_a_pixel_exact_crop(seed):
    rng = np.random.default_rng(seed)
    img = rng.uniform(size=(3, 32, 40))
    cv = cross_view_anchor(img, rng_seed=seed)
    v = cv.view
    assert 0.6 <= cv.scale <= 1.0
    assert cv.image.shape == (3, crop_side(32, cv.scale), crop_side(40, cv.scale))
    assert v.height % 4 == 0 and v.width % 4 == 0
    ys, xs = np.mgrid[0:v.height, 0:v.width]
    sx, sy = v.to_source(xs, ys)
    assert np.array_equal(cv.image, img[:, sy, sx])


def test_full_frame_no_flip_is_identity():
    img = np.random.default_rng(0).uniform(size=(3, 16, 16))
    cv = cross_view_anchor(img, rng_seed=0, scale_range=(1.0, 1.0), flip_prob=0.0)
    assert np.array_equal(cv.image, img) and cv.view == ViewMap(0, 0, 16, 16, False)


def test_anchor_affinity_examples():
    q, _ = np.linalg.qr(np.random.default_rng(0).normal(size=(4, 4)))
    g = FeatureGrid(Tensor(q * 5), 2, 2)
    all_anchors = sample_anchor_grid(g, (2, 2), 0)
    aff = anchor_affinity(g, all_anchors, "dot")
    assert aff.norm_axis == OVER_COLS
    assert np.array_equal(aff.table.data.argmax(axis=1), np.arange(4))
    assert np.array_equal(pseudo_labels(aff).j_star, np.arange(4))
    one = AnchorSet(0, np.array([2]), Tensor(q[:, [2]]), (1, 1))
    assert np.allclose(anchor_affinity(g, one).table.data, 1.0)
    two = AnchorSet(0, np.array([0, 1]), Tensor(np.ones((4, 2))), (1, 2))
    assert np.allclose(anchor_affinity(g, two).table.data, 0.5)
    with pytest.raises(StateError):
        anchor_affinity(g, AnchorSet(0, np.zeros(0, np.int64), Tensor(np.zeros((4, 0))), (0, 0)))


@settings(max_examples=50, deadline=None)
@given(seeds)
def test_anchor_rows_sum_to_one(seed):
    rng = np.random.default_rng(seed)
    g = rand_grid(rng, 4, 6, 6, scale=3.0)
    a = anchor_affinity(g, sample_anchor_grid(rand_grid(rng, 4, 6, 6), (3, 3), seed)).table.data
    assert np.all(np.abs(a.sum(axis=1) - 1.0) <= 1e-6)


def test_pseudo_label_rules():
    rows = np.array([[0.1, 0.7, 0.2], [0.5, 0.5, 0.0]])
    labels = pseudo_labels(AffinityMatrix(Tensor(rows), OVER_COLS))
    assert labels.j_star.tolist() == [1, 0]
    with pytest.raises(DimensionError):
        pseudo_labels(AffinityMatrix(Tensor(rows.T), OVER_ROWS))


@settings(max_examples=40, deadline=None)
@given(seeds)
def test_pseudo_labels_invariant_under_monotone_transform(seed):
    rng = np.random.default_rng(seed)
    kt = rand_grid(rng, 3, 4, 4)
    anchors = sample_anchor_grid(rand_grid(rng, 3, 4, 4), (2, 2), seed)
    base = pseudo_labels(anchor_affinity(kt, anchors)).j_star
    sharper = pseudo_labels(anchor_affinity(kt, anchors, temperature=0.37)).j_star
    sim = dc.pairwise_similarity(kt.values, anchors.features).data
    transformed = pseudo_labels(AffinityMatrix(Tensor(2.0 * np.cbrt(sim) - 1.0), OVER_COLS)).j_star
    assert np.array_equal(base, sharper) and np.array_equal(base, transformed)


def pcl_reference(kt1, anchors, j_star, negs, mode="both"):
    """Direct evaluation of the contrastive objective, one position at a time."""
    total = 0.0
    n = kt1.shape[1]
    for i in range(n):
        q = kt1[:, i]
        sa = np.array([-np.sum((q - anchors[:, j]) ** 2) for j in range(anchors.shape[1])])
        sn = np.array([-np.sum((q - negs[:, k]) ** 2) for k in range(negs.shape[1])])
        pos = sa[j_star[i]]
        if mode == "both":
            denom = np.concatenate([sa, sn])
        elif mode == "intra":
            denom = sa
        else:
            denom = np.concatenate([[pos], sn])
        m = denom.max()
        total += -(pos - m - math.log(np.exp(denom - m).sum()))
    return total / n


@settings(max_examples=40, deadline=None)
@given(seeds, st.sampled_from(["both", "inter", "intra"]))
def test_pcl_loss_matches_direct_formula(seed, mode):
    rng = np.random.default_rng(seed)
    kt1 = rand_grid(rng, 3, 4, 4)
    anchors = sample_anchor_grid(rand_grid(rng, 3, 4, 4), (2, 2), seed)
    negs = rng.normal(size=(3, 6))
    j_star = rng.integers(0, 4, size=16)
    loss = pcl_loss(kt1, anchors, PseudoLabels(j_star, None), Tensor(negs), negative_mode=mode).item()
    assert loss == pytest.approx(pcl_reference(kt1.values.data, anchors.features.data, j_star, negs, mode),
                                 rel=1e-10, abs=1e-12)
    assert loss >= 0.0


def test_pcl_uniform_logits_give_log_z():
    kt1 = FeatureGrid.from_array(np.ones((2, 2, 2)))
    anchors = AnchorSet(0, np.arange(3), Tensor(np.ones((2, 3))), (1, 3))
    labels = PseudoLabels(np.zeros(4, np.int64), None)
    negs = Tensor(np.ones((2, 5)))
    assert pcl_loss(kt1, anchors, labels, negs).item() == pytest.approx(math.log(8), abs=1e-15)
    assert pcl_loss(kt1, anchors, labels, None).item() == pytest.approx(math.log(3), abs=1e-15)


def test_pcl_saturates_with_margin():
    anchors_np = np.array([[0.0, 1.0], [0.0, 0.0]])
    kt1 = FeatureGrid(Tensor(np.zeros((2, 1))), 1, 1)
    labels = PseudoLabels(np.array([0]), None)
    losses = []
    for margin in (1.0, 5.0, 20.0):
        anchors = AnchorSet(0, np.arange(2), Tensor(anchors_np * margin), (1, 2))
        losses.append(pcl_loss(kt1, anchors, labels, None).item())
    assert losses[0] > losses[1] > losses[2] and losses[2] < 1e-100


def test_pcl_negative_cap_and_errors():
    rng = np.random.default_rng(0)
    kt1 = rand_grid(rng, 3, 2, 2)
    anchors = sample_anchor_grid(rand_grid(rng, 3, 2, 2), (1, 2), 0)
    labels = PseudoLabels(np.zeros(4, np.int64), None)
    negs = rng.normal(size=(3, 10))
    capped = pcl_loss(kt1, anchors, labels, Tensor(negs), sample_ratio=1 / 4).item()
    first4 = pcl_loss(kt1, anchors, labels, Tensor(negs[:, :4])).item()
    assert capped == first4
    with pytest.raises(LabelError):
        pcl_loss(kt1, anchors, PseudoLabels(np.full(4, 2), None))
    with pytest.raises(DimensionError):
        pcl_loss(kt1, anchors, PseudoLabels(np.zeros(3, np.int64), None))


@settings(max_examples=30, deadline=None)
@given(seeds)
def test_pcl_negative_order_does_not_matter(seed):
    rng = np.random.default_rng(seed)
    kt1 = rand_grid(rng, 3, 3, 3)
    anchors = sample_anchor_grid(rand_grid(rng, 3, 3, 3), (3, 3), seed)
    labels = PseudoLabels(rng.integers(0, 9, size=9), None)
    negs = rng.normal(size=(3, 7))
    a = pcl_loss(kt1, anchors, labels, Tensor(negs)).item()
    b = pcl_loss(kt1, anchors, labels, Tensor(negs[:, rng.permutation(7)])).item()
    assert abs(a - b) <= 1e-12


def test_pcl_static_pair_beats_uniform_bound():
    rng = np.random.default_rng(2)
    kt = rand_grid(rng, 4, 4, 4, scale=2.0)
    anchors = sample_anchor_grid(kt, (2, 2), 0)
    labels = pseudo_labels(anchor_affinity(kt, anchors))
    loss = pcl_loss(kt, anchors, labels, None).item()
    assert loss < math.log(4)


def test_pcl_verbatim_form():
    rng = np.random.default_rng(1)
    kt1 = rand_grid(rng, 2, 2, 2)
    anchors = sample_anchor_grid(rand_grid(rng, 2, 2, 2), (1, 2), 0)
    labels = PseudoLabels(np.array([0, 1, 1, 0]), None)
    sim = dc.pairwise_similarity(kt1.values, anchors.features).data
    logp = sim - np.log(np.exp(sim).sum(axis=1, keepdims=True))
    expected = -math.log(np.exp(logp[np.arange(4), labels.j_star]).sum())
    assert pcl_loss(kt1, anchors, labels, form="verbatim").item() == pytest.approx(expected, rel=1e-12)


@settings(max_examples=10, deadline=None)
@given(seeds, st.sampled_from(["both", "inter", "intra"]), st.sampled_from(["mean", "verbatim"]))
def test_pcl_gradients(seed, mode, form):
    rng = np.random.default_rng(seed)
    negs0 = rng.normal(size=(3, 8))
    labels = PseudoLabels(rng.integers(0, 4, size=16), None)
    pos = np.array([0, 3, 12, 15])

    def f(x):
        kt1 = FeatureGrid(dc.reshape(dc.take(x, np.arange(48)), (3, 16)), 4, 4)
        feats = dc.reshape(dc.take(x, np.arange(48, 60)), (3, 4))
        negs = dc.add(Tensor(negs0), dc.reshape(dc.take(x, np.arange(60, 84)), (3, 8)))
        return pcl_loss(kt1, AnchorSet(1, pos, feats, (2, 2)), labels, negs, negative_mode=mode, form=form)

    assert finite_diff_check(f, Tensor(rng.normal(0, 0.5, size=84))).passed
