import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from indret.errors import ConfigError, DimensionError, LookupFailure, ModelError
from indret.evalkit import rasterize_roi
from indret.explain import (
    CamMap,
    aggregate_cams,
    decode,
    explain_batch,
    explain_pair,
    gradcam_layer,
    gradcam_map,
    heatmap,
    read_map_csv,
    write_heatmap,
    write_map_csv,
)
from indret.network import Model, ModelConfig
from indret.patching import load_image

TINY = ModelConfig(grid_rows=3, grid_cols=3, in_channels=2, channels=(2, 3), strides=(1, 2))


def test_zero_gradient_gives_zero_cam(rng):
    act = rng.uniform(0, 1, (2, 2, 2, 2, 3))
    assert np.all(gradcam_map(act, np.zeros_like(act), (2, 2, 2, 2)) == 0.0)


def test_single_channel_unit_weight_returns_activation(rng):
    act = rng.uniform(0.1, 1, (3, 3, 3, 3, 1))
    np.testing.assert_array_equal(gradcam_map(act, np.ones_like(act), (3, 3, 3, 3)), act[..., 0])


def test_two_channel_hand_computed():
    act = np.zeros((1, 1, 1, 2, 2))
    act[0, 0, 0, 0] = [1.0, 2.0]
    act[0, 0, 0, 1] = [3.0, -1.0]
    grad = np.zeros_like(act)
    grad[0, 0, 0, 0] = [1.0, -2.0]
    grad[0, 0, 0, 1] = [3.0, 0.0]
    # channel weights are the spatial means: (2, -1)
    want = np.array([max(0.0, 2 * 1 - 1 * 2), max(0.0, 2 * 3 - 1 * -1)])
    np.testing.assert_array_equal(gradcam_map(act, grad, (1, 1, 1, 2))[0, 0, 0], want)


def test_gradcam_map_shape_mismatch():
    with pytest.raises(DimensionError):
        gradcam_map(np.ones((2, 2, 2, 2, 1)), np.ones((2, 2, 2, 2, 2)), (2, 2, 2, 2))


def test_aggregate_identities(rng):
    a = rng.uniform(0, 1, (3, 3, 3, 3))
    np.testing.assert_array_equal(aggregate_cams([a]).values, a)
    np.testing.assert_allclose(aggregate_cams([CamMap("x", a), CamMap("y", 2 * a)]).values, 1.5 * a, rtol=1e-15)


def test_aggregate_matches_loop_mean(rng):
    maps = [rng.uniform(0, 1, (2, 2, 2, 2)) for _ in range(5)]
    agg = aggregate_cams(maps).values
    for idx in itertools.product(range(2), repeat=4):
        assert abs(agg[idx] - sum(m[idx] for m in maps) / 5) <= 1e-12


@given(st.permutations(range(4)), st.integers(0, 2**31 - 1))
def test_aggregate_is_permutation_invariant(perm, seed):
    maps = [np.random.default_rng(seed + i).uniform(0, 1, (2, 2, 2, 2)) for i in range(4)]
    np.testing.assert_allclose(aggregate_cams([maps[i] for i in perm]).values, aggregate_cams(maps).values,
                               rtol=1e-15, atol=0)


def test_aggregate_errors():
    with pytest.raises(ConfigError):
        aggregate_cams([])
    with pytest.raises(DimensionError):
        aggregate_cams([np.ones((2, 2, 2, 2)), np.ones((3, 3, 3, 3))])


def test_decode_all_ones_fourteen_grid():
    p, q = decode(np.ones((14, 14, 14, 14)))
    assert np.all(p.values == 196.0) and np.all(q.values == 196.0)
    assert (p.role, q.role) == ("target", "query")


def test_decode_point_mass():
    m = np.zeros((6, 6, 8, 8))
    m[2, 3, 5, 7] = 2.5
    p, q = decode(m)
    assert p.values[2, 3] == 2.5 and np.count_nonzero(p.values) == 1
    assert q.values[5, 7] == 2.5 and np.count_nonzero(q.values) == 1


def test_decode_matches_quadruple_loop(rng):
    m = rng.uniform(0, 1, (4, 4, 4, 4))
    p, q = decode(m)
    for i, j in itertools.product(range(4), repeat=2):
        assert p.values[i, j] == pytest.approx(sum(m[i, j, k, l] for k in range(4) for l in range(4)), rel=1e-14)
        assert q.values[i, j] == pytest.approx(sum(m[k, l, i, j] for k in range(4) for l in range(4)), rel=1e-14)


@given(st.integers(0, 2**31 - 1), st.integers(2, 5), st.integers(2, 5))
def test_decode_conserves_mass_and_sign(seed, a, b):
    m = np.random.default_rng(seed).uniform(0, 1, (a, b, a, b))
    p, q = decode(m)
    total = m.sum()
    assert abs(p.values.sum() - total) <= 1e-9 * total
    assert abs(q.values.sum() - total) <= 1e-9 * total
    assert p.values.min() >= 0 and q.values.min() >= 0


def test_decode_rank_check():
    with pytest.raises(DimensionError):
        decode(np.ones((3, 3, 3)))


def test_heatmap_zero_and_normalisation(rng):
    assert np.all(heatmap(np.zeros((3, 3)), 12, 12) == 0.0)
    h = heatmap(rng.uniform(0, 5, (3, 3)), 12, 9)
    assert h.shape == (12, 9) and h.max() == 1.0
    b = heatmap(rng.uniform(0, 5, (3, 3)), 7, 7, "bilinear")
    assert b.max() <= 1.0
    with pytest.raises(ConfigError):
        heatmap(np.ones((2, 2)), 4, 4, "cubic")


def test_heatmap_nearest_keeps_cells():
    h = heatmap(np.array([[1.0, 0.0], [0.0, 0.5]]), 4, 4)
    np.testing.assert_array_equal(h[:2, :2], 1.0)
    np.testing.assert_array_equal(h[2:, 2:], 0.5)


def test_layer_lookup_and_input_checks(rng):
    m = Model.init(TINY)
    x = rng.standard_normal((3, 3, 3, 3, 2))
    assert gradcam_layer(m, x, "block1").values.shape == (3, 3, 3, 3)
    assert gradcam_layer(m, x, 0).layer == "block0"
    with pytest.raises(LookupFailure):
        gradcam_layer(m, x, "block9")
    with pytest.raises(ModelError):
        explain_pair(m, rng.standard_normal((4, 4, 4, 4, 2)))


def test_explain_pair_contract(rng):
    m = Model.init(TINY)
    ex = explain_pair(m, rng.standard_normal((3, 3, 3, 3, 2)), (30, 30), (15, 12))
    assert ex.P.values.shape == (3, 3) and ex.Q.values.shape == (3, 3)
    assert ex.heat_target.shape == (30, 30) and ex.heat_query.shape == (15, 12)
    assert ex.P.values.min() >= 0
    assert len(ex.cams) == 2
    if ex.P.values.max() > 0:
        assert ex.heat_target.max() == 1.0


def test_batch_equals_single(rng, trained_small, small_corpus):
    model, _, _, test_ids = trained_small
    q = test_ids[0]
    pairs = [(t, q) for t in small_corpus.manifest.query(q).relevant[:3]]
    batch = explain_batch(model, small_corpus.tensors(pairs))
    for pair, ex in zip(pairs, batch):
        single = explain_pair(model, small_corpus.tensor(*pair))
        np.testing.assert_allclose(single.P.values, ex.P.values, rtol=1e-9, atol=1e-12)


def test_evidence_concentrates_on_motif(trained_small, small_corpus, small_dataset):
    """Held-out relevant pairs: Q peaks inside the query motif; on average P is higher on the target motif."""
    model, _, _, test_ids = trained_small
    ann = small_dataset[2]
    rows, cols = small_corpus.spec.rows, small_corpus.spec.cols
    inside, outside = [], []
    for q in test_ids:
        qroi = rasterize_roi(ann[small_corpus.query_image(q)], rows, cols)
        pairs = [(t, q) for t in small_corpus.manifest.query(q).relevant]
        for (t, _), ex in zip(pairs, explain_batch(model, small_corpus.tensors(pairs))):
            troi = rasterize_roi(ann[t], rows, cols)
            assert qroi.flat[np.argmax(ex.Q.values)]
            p = ex.P.normalized()
            inside.append(p[troi].mean())
            outside.append(p[~troi].mean())
    assert np.mean(inside) > np.mean(outside)


def test_map_csv_and_heatmap_files(tmp_path, rng):
    p = rng.uniform(0, 1, (3, 4))
    write_map_csv(tmp_path / "p.csv", p)
    np.testing.assert_allclose(read_map_csv(tmp_path / "p.csv"), p, rtol=1e-5)
    write_heatmap(tmp_path / "h.png", heatmap(p, 6, 8))
    img = load_image(tmp_path / "h.png")
    assert img.pixels.shape == (6, 8, 1) and img.pixels.max() == 1.0
