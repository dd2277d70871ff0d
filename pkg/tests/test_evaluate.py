import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stcl.diffcore import Tensor
from stcl.evaluate import boundary, contour_F, correspondence_accuracy, default_tol_radius, evaluate_clips, region_J
from stcl.segnet import NetConfig, init_params
from stcl.synthvid import ClipSpec, generate_clip


def square(n=16, y=4, x=4, side=8):
    m = np.zeros((n, n), int)
    m[y:y + side, x:x + side] = 1
    return m


def test_j_cases():
    a = square()
    assert region_J(a, a, 1) == 1.0
    assert region_J(a, square(x=12, y=12, side=4), 1) == 0.0
    assert region_J(a, square(x=8), 1) == pytest.approx(1 / 3)
    assert region_J(np.zeros((4, 4)), np.zeros((4, 4)), 1) == 1.0


def test_f_cases():
    a = square(64, 10, 10, 20)
    assert contour_F(a, a, 1) == 1.0
    assert contour_F(a, square(64, 40, 40, 10), 1) == 0.0
    r = default_tol_radius(a.shape)
    assert r == 1
    assert contour_F(a, square(64, 10, 10 + r, 20), 1) == 1.0
    assert contour_F(a, square(64, 10, 10 + r + 3, 20), 1) < 1.0
    assert contour_F(np.zeros((4, 4)), np.zeros((4, 4)), 1) == 1.0
    assert contour_F(a, np.zeros_like(a), 1) == 0.0


def test_boundary_of_square_is_its_rim():
    b = boundary(square(8, 2, 2, 4) == 1)
    assert b.sum() == 12 and not b[3:5, 3:5].any()
    assert boundary(np.ones((3, 3), bool)).sum() == 8


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_metrics_are_bounded_and_symmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.integers(0, 3, size=(2, 12, 12))
    j = region_J(a, b, 1)
    f = contour_F(a, b, 1)
    assert 0 <= j <= 1 and 0 <= f <= 1
    assert j == region_J(b, a, 1) and f == pytest.approx(contour_F(b, a, 1))


def test_self_correspondence_is_perfect():
    clip = generate_clip(ClipSpec(texture_mode="textured"), 0)
    params = init_params(NetConfig(), 0)
    assert correspondence_accuracy(params, clip, 2, 2, tol=0) == 1.0
    acc = correspondence_accuracy(params, clip, 0, 1)
    assert 0.0 <= acc <= 1.0


def test_correspondence_nan_without_objects():
    clip = generate_clip(ClipSpec(n_objects=1), 0)
    clip.masks[:] = 0
    assert math.isnan(correspondence_accuracy(init_params(NetConfig(), 0), clip, 0, 1))


def test_evaluate_clips_report():
    clips = [generate_clip(ClipSpec(T=3), s) for s in range(2)]
    rep = evaluate_clips(init_params(NetConfig(), 0), clips, NetConfig())
    assert rep.clip_ids == [0, 1] and len(rep.per_object_J) == 6
    assert 0 <= rep.JF_mean <= 1 and rep.JF_mean == pytest.approx((rep.J_mean + rep.F_mean) / 2)
    assert set(rep.row()) == {"J", "F", "JF_mean", "corr_acc"}
