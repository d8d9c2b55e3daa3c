import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from indret.errors import ConfigError, DimensionError, ParameterError
from indret.ndtensor import central_difference
from indret.network import (
    HarParams,
    Model,
    ModelConfig,
    TrainConfig,
    evaluate_pairs,
    forward,
    har_apply,
    har_gradients,
    har_mask,
    parameter_count,
    predict_proba,
    train,
)
from indret.pipeline import fixed_pairs

TINY = ModelConfig(grid_rows=3, grid_cols=3, in_channels=2, channels=(2, 3), strides=(1, 2))


def gauss(d, mu, sigma):
    return math.exp(-((d - mu) ** 2) / (2 * sigma**2)) / (math.sqrt(2 * math.pi) * sigma)


def test_mask_peak_where_distance_equals_mu():
    p = HarParams(np.array([1.0, 1.0, 1.0, 1.0]), 1.0, 0.7)
    m = har_mask((3, 3, 3, 3), p)
    peak = 1.0 / (math.sqrt(2 * math.pi) * 0.7)
    # (2,1,1,1) is at squared distance 1
    assert m[2, 1, 1, 1] == peak
    assert m.max() == peak


def test_mask_lattice_centre_attains_peak():
    p = HarParams(np.array([0.0, 2.0, 1.0, 3.0]), 0.0, 1.3)
    m = har_mask((2, 4, 3, 5), p)
    assert m[0, 2, 1, 3] == pytest.approx(1.0 / (math.sqrt(2 * math.pi) * 1.3), rel=1e-15)


def test_mask_matches_scalar_formula():
    p = HarParams(np.array([1.0, 1.0, 1.0, 1.0]), 2.0, 1.0)
    m = har_mask((3, 3, 3, 3), p)
    for idx in itertools.product(range(3), repeat=4):
        d = sum((x - 1.0) ** 2 for x in idx)
        assert m[idx] == pytest.approx(gauss(d, 2.0, 1.0), rel=1e-14)


@given(st.lists(st.floats(0, 3), min_size=4, max_size=4), st.floats(0, 6), st.floats(0.3, 4))
def test_mask_is_bounded_by_peak(center, mu, sigma):
    p = HarParams(np.array(center), mu, sigma)
    m = har_mask((3, 4, 3, 4), p)
    peak = 1.0 / (math.sqrt(2 * math.pi) * sigma)
    grids = np.meshgrid(*(np.arange(n) - c for n, c in zip((3, 4, 3, 4), center)), indexing="ij")
    exponent = -((sum(g * g for g in grids) - mu) ** 2) / (2 * sigma**2)
    assert np.all(m >= 0)
    assert np.all(m[exponent > -700] > 0)  # below that exp() underflows
    assert np.all(m <= peak * (1 + 1e-15))


def test_sigma_must_be_positive():
    with pytest.raises(ParameterError):
        har_mask((2, 2, 2, 2), HarParams(np.zeros(4), 0.0, 0.0))
    with pytest.raises(ParameterError):
        har_mask((2, 2, 2, 2), HarParams(np.zeros(4), 0.0, -1.0))
    with pytest.raises(ParameterError):
        HarParams(np.zeros(3), 0.0, 1.0)


def test_tiny_sigma_is_clamped():
    m = har_mask((2, 2, 2, 2), HarParams(np.zeros(4), 0.0, 1e-9))
    assert m[0, 0, 0, 0] == pytest.approx(1.0 / (math.sqrt(2 * math.pi) * 1e-3))


def test_har_apply_identities(rng):
    f = rng.standard_normal((2, 3, 3, 3, 3, 4))
    np.testing.assert_array_equal(har_apply(f, np.zeros((3, 3, 3, 3))), f)
    np.testing.assert_array_equal(har_apply(f, np.ones((3, 3, 3, 3))), 2 * f)


def test_har_apply_elementwise_oracle(rng):
    f = rng.standard_normal((2, 2, 3, 2, 2))
    mask = rng.uniform(0, 1, (2, 2, 3, 2))
    out = har_apply(f, mask)
    for idx in itertools.product(*(range(n) for n in f.shape)):
        assert out[idx] == pytest.approx(f[idx] * (1 + mask[idx[:4]]), rel=1e-15)


def test_har_apply_shape_mismatch():
    with pytest.raises(DimensionError):
        har_apply(np.ones((1, 3, 3, 3, 3, 2)), np.ones((3, 3, 3, 2)))


def test_zero_upstream_zero_gradients(rng):
    f = rng.standard_normal((3, 3, 3, 3))
    g = har_gradients(np.zeros_like(f), f, HarParams(np.ones(4), 1.0, 1.0))
    assert g["mu"] == 0.0 and g["sigma"] == 0.0
    assert np.all(g["center"] == 0.0)


def test_single_element_mu_gradient_closed_form():
    # one element at the origin, c = (0.5, 0, 0, 0): d = 0.25
    u, fv, mu, sigma = 1.5, 2.0, 1.0, 0.8
    g = har_gradients(np.array([[[[u]]]]), np.array([[[[fv]]]]), HarParams(np.array([0.5, 0, 0, 0]), mu, sigma))
    theta = gauss(0.25, mu, sigma)
    assert g["mu"] == pytest.approx(u * fv * (0.25 - mu) * theta / sigma**2, rel=1e-14)
    assert g["sigma"] == pytest.approx(u * fv * ((0.25 - mu) ** 2 - sigma**2) * theta / sigma**3, rel=1e-14)
    # dTheta/dd = -Theta (d - mu) / sigma^2 and dd/dc0 = -2 (0 - 0.5) = 1
    assert g["center"][0] == pytest.approx(-u * fv * theta * (0.25 - mu) / sigma**2, rel=1e-14)


def test_random_case_matches_finite_differences_of_full_loss(rng):
    f = rng.standard_normal((2, 3, 3, 3, 3, 2))
    u = rng.standard_normal(f.shape)
    params = HarParams(np.array([0.8, 1.1, 1.3, 0.6]), 2.0, 1.2)

    def loss(vec):
        return float(np.sum(u * har_apply(f, har_mask((3, 3, 3, 3), HarParams.from_vector(vec)))))

    g = har_gradients(u, f, params)
    analytic = np.concatenate([g["center"], [g["mu"], g["sigma"]]])
    numeric = central_difference(loss, params.to_vector(), 1e-4)
    rel = np.abs(analytic - numeric) / np.maximum(np.abs(analytic), np.abs(numeric))
    assert rel.max() < 1e-4
    np.testing.assert_allclose(g["F"], u * (1 + har_mask((3, 3, 3, 3), params))[None, ..., None])


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(kernel=2)
    with pytest.raises(ConfigError):
        ModelConfig(channels=(4, 4), strides=(1,))
    with pytest.raises(ConfigError):
        ModelConfig(channels=(), strides=())
    with pytest.raises(ConfigError):
        ModelConfig(strides=(0, 1, 1, 1))


def test_layer_shapes_chain():
    cfg = ModelConfig(grid_rows=7, grid_cols=7)
    assert cfg.layer_shapes() == [(7,) * 4, (4,) * 4, (2,) * 4, (2,) * 4]
    m = Model.init(cfg)
    assert m.params["block0.conv1.w"].shape == (3, 3, 3, 3, 3, 8)
    assert m.params["head.w"].shape == (32, 2)
    assert all(m.params[f"block{b}.har"].size == 6 for b in range(4))
    assert parameter_count(m) > 0


def test_zero_input_zero_head_gives_even_odds():
    m = Model.init(TINY, zero_head=True)
    score, acts = forward(m, np.zeros((3, 3, 3, 3, 2)))
    np.testing.assert_array_equal(score.logits, [0.0, 0.0])
    assert score.relevance == 0.5
    assert len(acts) == 2 and acts[1].shape == (2, 2, 2, 2, 3)


def test_forward_probabilities_and_determinism(rng):
    x = rng.standard_normal((3, 3, 3, 3, 2))
    a, _ = forward(Model.init(TINY), x)
    b, _ = forward(Model.init(TINY), x)
    assert a.probabilities.sum() == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_array_equal(a.logits, b.logits)


def test_forward_shape_mismatch(rng):
    with pytest.raises(DimensionError):
        forward(Model.init(TINY), rng.standard_normal((3, 3, 3, 3, 3)))


def test_disabled_har_ignores_its_parameters(rng):
    cfg = ModelConfig(grid_rows=3, grid_cols=3, in_channels=2, channels=(2, 3), strides=(1, 2), har_enabled=False)
    x = rng.standard_normal((3, 3, 3, 3, 2))
    m = Model.init(cfg)
    before = forward(m, x)[0].logits
    m.set_har_params(0, HarParams(np.zeros(4), 3.0, 0.2))
    np.testing.assert_array_equal(forward(m, x)[0].logits, before)
    on = Model.init(TINY)
    on.params = dict(m.params)
    on.buffers = dict(m.buffers)
    assert not np.array_equal(forward(on, x)[0].logits, before)


def _toy_pairs(rng, n=12):
    out = []
    for i in range(n):
        x = rng.standard_normal((3, 3, 3, 3, 2)) * 0.1
        if i % 2:
            x[1, 1, 1, 1] += 3.0
        out.append((x, i % 2))
    return out


def test_zero_learning_rate_keeps_parameters(rng):
    m = Model.init(TINY)
    out, log = train(m, _toy_pairs(rng), TrainConfig(epochs=3, lr=0.0, batch_size=4))
    for k, v in m.params.items():
        np.testing.assert_array_equal(out.params[k], v)
    assert len(log.records) == 3


def test_single_class_is_rejected(rng):
    pairs = [(x, 1) for x, _ in _toy_pairs(rng)]
    with pytest.raises(ConfigError):
        train(Model.init(TINY), pairs, TrainConfig(epochs=1))


def test_toy_problem_is_learned(rng):
    out, log = train(Model.init(TINY), _toy_pairs(rng, 24), TrainConfig(epochs=25, lr=0.05, batch_size=8))
    assert max(r.accuracy for r in log.records) >= 0.99
    assert log.records[-1].loss < log.records[0].loss


def test_first_batch_loss_near_chance(trained_small):
    _, log, _, _ = trained_small
    assert abs(log.first_batch_loss - math.log(2.0)) <= 0.2


def test_planted_motif_pairs_separate_within_budget(trained_small):
    _, log, _, _ = trained_small
    assert len(log.records) <= 30
    assert max(r.accuracy for r in log.records) >= 0.99
    assert log.records[log.best_epoch].val_loss == min(r.val_loss for r in log.records)


def test_trained_model_beats_chance_on_held_out(trained_small, small_corpus):
    model, _, _, test_ids = trained_small
    loss, acc = evaluate_pairs(model, fixed_pairs(small_corpus, test_ids, 99))
    assert loss < math.log(2.0)
    assert acc > 0.5


def test_predict_proba_batches_agree(trained_small, small_corpus):
    model, _, _, test_ids = trained_small
    ts = [x for x, _ in fixed_pairs(small_corpus, test_ids, 3)][:5]
    np.testing.assert_allclose(predict_proba(model, ts, 2), predict_proba(model, ts, 5), atol=1e-12)
