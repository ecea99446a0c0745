import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cccf.mf import LatentFactors
from cccf.weights import (
    FALLBACK_WEIGHT,
    AnchorSet,
    WeightVectors,
    arc_cosine_distance,
    compute_weight_vectors,
    epanechnikov_weight,
    scale_integer_weights,
    select_anchors,
)


# arc_cosine_distance


def test_distance_identical():
    assert arc_cosine_distance([1, 0], [1, 0]) == 0.0


def test_distance_orthogonal():
    assert arc_cosine_distance([1, 0], [0, 1]) == pytest.approx(math.pi / 2, abs=1e-15)


def test_distance_45_degrees():
    assert abs(arc_cosine_distance([1, 1], [1, 0]) - math.pi / 4) < 1e-12


def test_distance_clamps_rounding():
    rng = np.random.default_rng(0)
    for _ in range(200):
        v = rng.standard_normal(7)
        same, opposite = arc_cosine_distance(v, 3 * v), arc_cosine_distance(v, -v)
        assert 0.0 <= same < 1e-7
        assert opposite == pytest.approx(math.pi)


def test_distance_zero_vector_rejected():
    with pytest.raises(ValueError):
        arc_cosine_distance([0, 0], [1, 0])


# epanechnikov_weight


def test_kernel_peak():
    assert epanechnikov_weight(0.0, 0.8) == 0.75


def test_kernel_boundary_is_zero():
    assert epanechnikov_weight(0.8, 0.8) == 0.0


def test_kernel_value():
    assert epanechnikov_weight(0.5, 0.8) == pytest.approx(0.5625, abs=1e-15)


def test_kernel_clamped_beyond_one():
    assert epanechnikov_weight(1.2, 2.0) == 0.0


@given(st.floats(0, 10), st.floats(1e-3, 10))
def test_kernel_range(d, h):
    w = epanechnikov_weight(d, h)
    assert 0.0 <= w <= 0.75


@given(st.floats(0, 3), st.floats(0, 3), st.floats(1e-3, 4))
def test_kernel_monotone_inside_bandwidth(d1, d2, h):
    lo, hi = sorted((d1, d2))
    if hi < h:
        assert epanechnikov_weight(lo, h) >= epanechnikov_weight(hi, h)


# select_anchors


def test_single_anchor_is_mean():
    rng = np.random.default_rng(0)
    lat = LatentFactors(rng.standard_normal((10, 3)), rng.standard_normal((7, 3)))
    a = select_anchors(lat, 1, seed=0)
    np.testing.assert_allclose(a.user_anchors[0], lat.user_factors.mean(axis=0), atol=1e-12)
    np.testing.assert_allclose(a.item_anchors[0], lat.item_factors.mean(axis=0), atol=1e-12)


def test_two_blobs_found():
    rng = np.random.default_rng(1)
    def blob(center, k):
        ang = rng.uniform(0, 2 * np.pi, k)
        rad = 0.1 * np.sqrt(rng.uniform(0, 1, k))
        return np.asarray(center) + np.column_stack([rad * np.cos(ang), rad * np.sin(ang)])
    pts = np.vstack([blob((10, 10), 30), blob((-10, -10), 30)])
    lat = LatentFactors(pts, pts[::-1].copy())
    a = select_anchors(lat, 2, seed=3)
    for cents in (a.user_anchors, a.item_anchors):
        got = sorted(map(tuple, cents))
        np.testing.assert_allclose(got, [(-10, -10), (10, 10)], atol=0.2)


def test_every_row_its_own_anchor():
    rng = np.random.default_rng(2)
    lat = LatentFactors(rng.standard_normal((6, 4)), rng.standard_normal((6, 4)))
    a = select_anchors(lat, 6, seed=0)
    assert sorted(map(tuple, a.user_anchors)) == sorted(map(tuple, lat.user_factors))
    assert sorted(map(tuple, a.item_anchors)) == sorted(map(tuple, lat.item_factors))


def test_too_many_anchors_rejected():
    lat = LatentFactors(np.ones((3, 2)), np.ones((5, 2)))
    with pytest.raises(ValueError):
        select_anchors(lat, 4)


def test_anchor_selection_is_seeded():
    rng = np.random.default_rng(5)
    lat = LatentFactors(rng.standard_normal((40, 3)), rng.standard_normal((30, 3)))
    a, b = select_anchors(lat, 4, seed=9), select_anchors(lat, 4, seed=9)
    assert a.user_anchors.tobytes() == b.user_anchors.tobytes()
    assert a.item_anchors.tobytes() == b.item_anchors.tobytes()


# compute_weight_vectors


def test_row_on_anchor_gets_peak_and_far_anchors_zero():
    anchors = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [1.0, 0.05]])
    lat = LatentFactors(np.array([[1.0, 0.05]]), np.array([[1.0, 0.0]]))
    w = compute_weight_vectors(lat, AnchorSet(anchors, anchors), 0.8)
    assert w.user[0, 3] == 0.75
    # anchors 1 and 2 sit at angular distance >= pi/2 > 0.8
    assert w.user[0, 1] == 0.0 and w.user[0, 2] == 0.0
    assert 0 < w.user[0, 0] < 0.75


def test_huge_bandwidth_only_clamps_beyond_one():
    rng = np.random.default_rng(0)
    lat = LatentFactors(rng.standard_normal((30, 3)), rng.standard_normal((30, 3)))
    anc = select_anchors(lat, 4, seed=0)
    w = compute_weight_vectors(lat, anc, math.pi + 1e-3)
    from cccf.weights import pairwise_arc_cosine
    d = pairwise_arc_cosine(lat.user_factors, anc.user_anchors)
    expect = np.where(d < 1.0, 0.75 * (1 - d ** 2), 0.0)
    fallback = ~expect.any(axis=1)
    np.testing.assert_allclose(w.user[~fallback], expect[~fallback], atol=1e-15)


def test_fallback_for_isolated_row():
    anchors = np.array([[1.0, 0.0], [0.0, 1.0]])
    lat = LatentFactors(np.array([[-1.0, -1.0]]), np.array([[1.0, 0.0]]))
    w = compute_weight_vectors(lat, AnchorSet(anchors, anchors), 0.5)
    assert np.count_nonzero(w.user[0]) == 1
    assert w.user[0].max() == FALLBACK_WEIGHT


def test_sparsity_shrinks_with_bandwidth():
    rng = np.random.default_rng(4)
    lat = LatentFactors(rng.standard_normal((20, 5)), rng.standard_normal((20, 5)))
    anc = select_anchors(lat, 4, seed=0)
    nnz = [np.count_nonzero(compute_weight_vectors(lat, anc, h).user)
           for h in (1.0, 0.9, 0.8, 0.7, 0.6, 0.5)]
    assert all(a >= b for a, b in zip(nnz, nnz[1:]))


@given(st.integers(0, 10_000), st.floats(0.05, 3.5))
def test_weight_invariants(seed, h):
    rng = np.random.default_rng(seed)
    lat = LatentFactors(rng.standard_normal((15, 4)), rng.standard_normal((12, 4)))
    anc = select_anchors(lat, 3, seed=seed)
    w = compute_weight_vectors(lat, anc, h)
    for rows in (w.user, w.item):
        assert np.all(rows >= 0) and np.all(rows <= 0.75)
        assert np.all(rows.any(axis=1))
    # a pair weight vanishes exactly when one side does
    pair = w.user[:, None, :] * w.item[None, :, :]
    assert np.array_equal(pair == 0, (w.user[:, None, :] == 0) | (w.item[None, :, :] == 0))


def test_normalized_distance_option():
    anchors = np.array([[1.0, 0.0], [0.0, 1.0]])
    lat = LatentFactors(np.array([[1.0, 1.0]]), np.array([[1.0, 0.0]]))
    raw = compute_weight_vectors(lat, AnchorSet(anchors, anchors), 0.8)
    norm = compute_weight_vectors(lat, AnchorSet(anchors, anchors), 0.8, normalize_distance=True)
    assert raw.user[0, 0] == pytest.approx(0.75 * (1 - (math.pi / 4) ** 2))
    assert norm.user[0, 0] == pytest.approx(0.75 * (1 - 0.25 ** 2))


# scale_integer_weights


def wv(user, item):
    return WeightVectors(np.array(user, dtype=float), np.array(item, dtype=float), 0.8)


def test_scale_examples():
    iw = scale_integer_weights(wv([[0.5625]], [[0.75]]), 100)
    assert iw.user[0, 0] == 56 and iw.item[0, 0] == 75
    assert scale_integer_weights(wv([[0.75]], [[0.75]]), 4).user[0, 0] == 3


def test_scale_rounds_half_away_from_zero():
    iw = scale_integer_weights(wv([[0.125, 0.375, 0.001]], [[0.5]]), 4)
    assert iw.user.tolist() == [[1, 2, 0]]


@given(st.integers(0, 10_000), st.integers(1, 10_000))
def test_scale_error_bound(seed, e):
    rng = np.random.default_rng(seed)
    u = rng.uniform(0, 0.75, (20, 5)) * (rng.random((20, 5)) < 0.6)
    w = WeightVectors(u, u[::-1].copy(), 0.8)
    iw = scale_integer_weights(w, e)
    assert np.all(np.abs(iw.user / e - w.user) <= 0.5 / e + 1e-15)
    assert np.all(iw.user[w.user == 0] == 0)


def test_scale_rejects_bad_e():
    with pytest.raises(ValueError):
        scale_integer_weights(wv([[0.5]], [[0.5]]), 0)
