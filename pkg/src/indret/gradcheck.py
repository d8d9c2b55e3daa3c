"""Finite-difference verification of the analytic HAR gradients and the tape ops."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import nnops
from .ndtensor import GradTape, backward, central_difference, contract_double, relu, tsum
from .network import HarParams, har_apply, har_gradients, har_layer, har_mask

HAR_PARAM_NAMES = ("center", "mu", "sigma")


def relative_error(analytic, numeric, floor: float) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)`` elementwise."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


@dataclass
class HarCase:
    shape: tuple
    params: HarParams
    f: np.ndarray
    upstream: np.ndarray

    def loss(self, vec) -> float:
        mask = har_mask(self.shape, HarParams.from_vector(vec))
        return float(np.sum(self.upstream * har_apply(self.f, mask)))

    def masked_part(self, vec) -> float:
        # the residual "+ F" term is parameter free; differencing it only adds cancellation
        mask = har_mask(self.shape, HarParams.from_vector(vec))
        return float(np.sum(self.upstream * self.f * mask[None, ..., None]))


def random_har_case(rng, max_side: int = 5, sigma_range=(0.1, 5.0), mu_range=(0.0, 20.0)) -> HarCase:
    shape = tuple(int(v) for v in rng.integers(1, max_side + 1, size=4))
    center = np.array([rng.uniform(0.0, s - 1.0) if s > 1 else 0.0 for s in shape])
    params = HarParams(center, float(rng.uniform(*mu_range)), float(rng.uniform(*sigma_range)))
    lead = (2,) + shape + (2,)
    return HarCase(shape, params, rng.standard_normal(lead), rng.standard_normal(lead))


def check_har_case(case: HarCase, h: float = 1e-4, componentwise: bool = False) -> np.ndarray:
    """Relative errors of ``[c, mu, sigma]`` against central differences.

    The centre is one vector parameter, so its error is measured on the
    4-vector (``componentwise`` gives the six-entry elementwise view).
    Gradients that are numerically zero are compared absolutely, against
    ``1e-6`` of the scale an active mask produces,
    ``sum|u F| / (sqrt(2 pi) sigma^2)``.
    """
    g = har_gradients(case.upstream, case.f, case.params)
    analytic = np.concatenate([g["center"], [g["mu"], g["sigma"]]])
    numeric = central_difference(case.masked_part, case.params.to_vector(), h)
    sigma = case.params.sigma
    floor = 1e-6 * float(np.sum(np.abs(case.upstream * case.f))) / (np.sqrt(2.0 * np.pi) * sigma * sigma)
    if componentwise:
        return relative_error(analytic, numeric, floor)
    dc = np.linalg.norm(analytic[:4] - numeric[:4])
    c_err = dc / max(np.linalg.norm(analytic[:4]), np.linalg.norm(numeric[:4]), floor)
    return np.concatenate([[c_err], relative_error(analytic[4:], numeric[4:], floor)])


# ---------------------------------------------------------------------------
# Tape ops
# ---------------------------------------------------------------------------


def _tape_check(build, inputs: dict, h: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``build(tape, vars)`` maps leaf vars (by name) to a scalar node.
    """
    tape = GradTape()
    leaves = {k: tape.leaf(v) for k, v in inputs.items()}
    grads = backward(tape, build(tape, leaves))
    worst = 0.0
    for name, value in inputs.items():

        def f(x, name=name):
            t = GradTape()
            vs = {k: t.leaf(x if k == name else v) for k, v in inputs.items()}
            return float(build(t, vs).value)

        numeric = central_difference(f, value, h)
        analytic = grads[leaves[name]]
        floor = max(1.0, float(np.abs(numeric).max())) * 1e-7
        worst = max(worst, float(relative_error(analytic, numeric, floor).max()))
    return worst


def tape_suite(rng) -> dict:
    """One randomised check per differentiable op; returns op -> max rel. error."""
    r = rng.standard_normal
    w_out = r((2, 3, 3, 3, 3, 2))
    out = {}
    for stride in (1, 2):
        def conv(t, v, stride=stride):
            y = nnops.conv_nd(v["x"], v["w"], v["b"], stride)
            return tsum(y * t.constant(np.cos(np.arange(y.value.size)).reshape(y.shape)))
        out[f"conv_nd/stride{stride}"] = _tape_check(
            conv, {"x": r((2, 3, 3, 3, 3, 2)), "w": r((3, 3, 3, 3, 2, 3)), "b": r(3)})

    def bn(t, v):
        y, _, _ = nnops.batch_norm(v["x"], v["g"], v["b"])
        return tsum(y * t.constant(w_out))
    out["batch_norm"] = _tape_check(bn, {"x": r((2, 3, 3, 3, 3, 2)), "g": r(2), "b": r(2)})

    mean, var = r(2), rng.uniform(0.5, 2.0, 2)

    def an(t, v):
        return tsum(nnops.affine_norm(v["x"], v["g"], v["b"], mean, var) * t.constant(w_out))
    out["affine_norm"] = _tape_check(an, {"x": r((2, 3, 3, 3, 3, 2)), "g": r(2), "b": r(2)})

    def har(t, v):
        return tsum(har_layer(v["x"], v["p"]) * t.constant(w_out))
    out["har_layer"] = _tape_check(har, {"x": r((2, 3, 3, 3, 3, 2)), "p": np.array([1.0, 0.5, 1.5, 1.0, 1.0, 1.3])})

    def contract(t, v):
        return tsum(contract_double(v["a"], v["b"]) * t.constant(np.arange(36.0).reshape(3, 2, 2, 3)))
    out["contract_double"] = _tape_check(contract, {"a": r((3, 2, 4, 2)), "b": r((4, 2, 2, 3))})

    labels = np.array([0, 1, 1])

    def head(t, v):
        pooled = nnops.global_avg_pool(relu(v["x"]))
        return nnops.softmax_cross_entropy(pooled, labels)
    out["pool+softmax_ce"] = _tape_check(head, {"x": r((3, 2, 2, 2, 2, 2))})
    return out


@dataclass
class GradcheckReport:
    seed: int
    configurations: int
    har_max_rel_error: float
    har_per_param: dict
    tape_errors: dict = field(default_factory=dict)
    seconds: float = 0.0

    @property
    def max_rel_error(self) -> float:
        return max([self.har_max_rel_error] + list(self.tape_errors.values()))

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "configurations": self.configurations,
            "max_rel_error": self.max_rel_error,
            "har_max_rel_error": self.har_max_rel_error,
            "har_per_param": self.har_per_param,
            "tape_errors": self.tape_errors,
            "seconds": round(self.seconds, 3),
        }


def run_suite(seed: int = 0, configurations: int = 100, h: float = 1e-4, tape: bool = True) -> GradcheckReport:
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    errs = np.array([check_har_case(random_har_case(rng), h) for _ in range(configurations)])
    per = {n: float(errs[:, i].max()) for i, n in enumerate(HAR_PARAM_NAMES)}
    tape_errors = tape_suite(rng) if tape else {}
    return GradcheckReport(seed, configurations, float(errs.max()), per, tape_errors,
                           time.perf_counter() - start)
