import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from indret.errors import ConfigError, DimensionError, PersistenceError
from indret.matchtensor import (
    DEFAULT_METRICS,
    MetricKind,
    build_multiview,
    build_view,
    estimate_inverse_variance,
    load_match_tensor,
    match_tensor_from_bytes,
    match_tensor_to_bytes,
    parse_metrics,
    patch_similarity,
    save_match_tensor,
)
from indret.patching import GridSpec, PatchGrid

ALL = tuple(MetricKind)


def scalar_sim(p, q, metric, inv_var=None, centred=False):
    """Independent scalar oracle: plain Python loops over one patch pair."""
    p, q = list(map(float, p)), list(map(float, q))
    if metric is MetricKind.COSINE:
        if centred:
            mp, mq = sum(p) / len(p), sum(q) / len(q)
            p, q = [x - mp for x in p], [x - mq for x in q]
        dot = sum(a * b for a, b in zip(p, q))
        na = sum(a * a for a in p) ** 0.5
        nb = sum(b * b for b in q) ** 0.5
        return 0.0 if na == 0 or nb == 0 else dot / (na * nb)
    if metric is MetricKind.EUCLIDEAN:
        d = sum((a - b) ** 2 for a, b in zip(p, q)) ** 0.5
    elif metric is MetricKind.MANHATTAN:
        d = sum(abs(a - b) for a, b in zip(p, q))
    else:
        d = sum(w * (a - b) ** 2 for a, b, w in zip(p, q, inv_var)) ** 0.5
    return 1.0 / (1.0 + d)


def grid(rng, m=2, n=2, length=5):
    return PatchGrid(GridSpec(m, n), rng.uniform(0, 1, (m, n, length)))


def test_self_similarity():
    p = np.array([0.2, 0.5, 0.9])
    assert patch_similarity(p, p, MetricKind.COSINE) == pytest.approx(1.0)
    assert patch_similarity(p, p, MetricKind.EUCLIDEAN) == 1.0
    assert patch_similarity(p, p, MetricKind.MANHATTAN) == 1.0
    assert patch_similarity(p, p, MetricKind.MAHALANOBIS, np.ones(3)) == 1.0


def test_cosine_zero_vector_and_opposites():
    assert patch_similarity(np.zeros(3), np.ones(3), MetricKind.COSINE) == 0.0
    assert patch_similarity(np.array([1.0, 0.0]), np.array([-1.0, 0.0]), MetricKind.COSINE) == -1.0


def test_distance_mapping_hand_values():
    p, q = np.array([0.0, 0.0]), np.array([3.0, 4.0])
    assert patch_similarity(p, q, MetricKind.EUCLIDEAN) == pytest.approx(1 / 6)
    assert patch_similarity(p, q, MetricKind.MANHATTAN) == pytest.approx(1 / 8)
    assert patch_similarity(p, q, MetricKind.MAHALANOBIS, np.array([4.0, 0.0])) == pytest.approx(1 / 7)


def test_similarity_errors():
    with pytest.raises(DimensionError):
        patch_similarity(np.ones(2), np.ones(3), MetricKind.COSINE)
    with pytest.raises(ConfigError):
        patch_similarity(np.ones(2), np.ones(2), MetricKind.MAHALANOBIS)


def test_metric_parsing():
    assert parse_metrics("cos, l2,manhattan") == DEFAULT_METRICS
    with pytest.raises(ConfigError):
        MetricKind.parse("hamming")


@pytest.mark.parametrize("metric", ALL)
def test_view_matches_scalar_double_loop(rng, metric):
    t, q = grid(rng), grid(rng)
    inv = estimate_inverse_variance(np.concatenate([t.flat(), q.flat()]))
    view = build_view(t, q, metric, inv).values
    assert view.shape == (2, 2, 2, 2)
    for i, j, k, l in itertools.product(range(2), repeat=4):
        want = scalar_sim(t.patches[i, j], q.patches[k, l], metric, inv, centred=True)
        assert view[i, j, k, l] == pytest.approx(want, abs=1e-12)


def test_uncentred_cosine_matches_patch_similarity(rng):
    t, q = grid(rng), grid(rng)
    view = build_view(t, q, MetricKind.COSINE, center_cosine=False).values
    for i, j, k, l in itertools.product(range(2), repeat=4):
        assert view[i, j, k, l] == pytest.approx(
            patch_similarity(t.patches[i, j], q.patches[k, l], MetricKind.COSINE), abs=1e-12)


def test_self_pair_diagonal_is_one(rng):
    g = grid(rng, 4, 3, 6)
    v = build_view(g, g, MetricKind.COSINE).values
    for i, j in itertools.product(range(4), range(3)):
        assert v[i, j, i, j] == pytest.approx(1.0, abs=1e-12)


def test_fourteen_grid_shapes(rng):
    g = grid(rng, 14, 14, 4)
    t = build_multiview(g, g)
    assert t.values.shape == (14, 14, 14, 14, 3)
    assert t.metrics == DEFAULT_METRICS
    assert len(t.views) == 3


def test_mismatched_grids(rng):
    with pytest.raises(DimensionError):
        build_view(grid(rng, 2, 2), grid(rng, 3, 2), MetricKind.EUCLIDEAN)
    with pytest.raises(DimensionError):
        build_view(grid(rng, 2, 2, 4), grid(rng, 2, 2, 5), MetricKind.EUCLIDEAN)


def test_multiview_metric_validation(rng):
    g = grid(rng)
    with pytest.raises(ConfigError):
        build_multiview(g, g, ())
    with pytest.raises(ConfigError):
        build_multiview(g, g, ("cosine", "cos"))


@given(st.integers(0, 2**31 - 1), st.integers(2, 4), st.integers(2, 4))
def test_views_are_bounded(seed, m, n):
    rng = np.random.default_rng(seed)
    t, q = grid(rng, m, n, 3), grid(rng, m, n, 3)
    inv = estimate_inverse_variance(t.flat())
    v = build_multiview(t, q, ALL, inv).values
    assert np.all(v[..., 0] >= -1) and np.all(v[..., 0] <= 1)
    assert np.all(v[..., 1:] > 0) and np.all(v[..., 1:] <= 1)


@given(st.integers(0, 2**31 - 1))
def test_swap_symmetry_is_exact(seed):
    rng = np.random.default_rng(seed)
    a, b = grid(rng, 3, 3, 4), grid(rng, 3, 3, 4)
    inv = estimate_inverse_variance(a.flat())
    ab = build_multiview(a, b, ALL, inv).values
    ba = build_multiview(b, a, ALL, inv).values
    np.testing.assert_array_equal(ab, ba.transpose(2, 3, 0, 1, 4))


def test_serialization_round_trip(tmp_path, rng):
    t = build_multiview(grid(rng), grid(rng), target_id="img1", query_id="q1")
    back = match_tensor_from_bytes(match_tensor_to_bytes(t))
    np.testing.assert_array_equal(back.values, t.values)
    assert (back.metrics, back.target_id, back.query_id) == (t.metrics, "img1", "q1")
    save_match_tensor(tmp_path / "t.imt", t)
    np.testing.assert_array_equal(load_match_tensor(tmp_path / "t.imt").values, t.values)


def test_serialization_corruption(rng):
    data = match_tensor_to_bytes(build_multiview(grid(rng), grid(rng)))
    with pytest.raises(PersistenceError):
        match_tensor_from_bytes(b"ZZZZ" + data[4:])
    with pytest.raises(PersistenceError):
        match_tensor_from_bytes(data[:-9])
