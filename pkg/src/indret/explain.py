"""Grad-CAM on 4D activations, CAM aggregation and evidence decoding."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, LookupFailure, ModelError
from .evalkit import normalize_map
from .matchtensor import MatchTensor
from .ndtensor import backward, contract_double, rescale_nd, tsum
from .network import RELEVANT, ClassScore, Model, forward_trace
from .patching import save_image


@dataclass(frozen=True)
class CamMap:
    layer: str
    values: np.ndarray


@dataclass(frozen=True)
class AggregatedCam:
    values: np.ndarray
    layer_count: int


@dataclass(frozen=True)
class ContributionMap:
    role: str  # "target" (P) or "query" (Q)
    values: np.ndarray

    def normalized(self) -> np.ndarray:
        return normalize_map(self.values)


@dataclass
class Explanation:
    score: ClassScore
    P: ContributionMap
    Q: ContributionMap
    cams: list = field(default_factory=list)
    aggregated: AggregatedCam | None = None
    heat_target: np.ndarray | None = None
    heat_query: np.ndarray | None = None


def gradcam_map(activation, gradient, out_shape) -> np.ndarray:
    """ReLU of the gradient-weighted channel sum, rescaled to ``out_shape``.

    ``activation`` and ``gradient`` are ``(*spatial, channels)``; the channel
    weights are the spatial means of the gradient.
    """
    activation = np.asarray(activation)
    gradient = np.asarray(gradient)
    if activation.shape != gradient.shape:
        raise DimensionError(f"activation {activation.shape} vs gradient {gradient.shape}")
    spatial_axes = tuple(range(activation.ndim - 1))
    weights = gradient.mean(axis=spatial_axes)
    cam = np.maximum(activation @ weights, 0.0)
    return np.maximum(rescale_nd(cam, out_shape), 0.0)


def _resolve_layer(model: Model, layer) -> int:
    names = model.layer_names
    if isinstance(layer, (int, np.integer)) and 0 <= layer < len(names):
        return int(layer)
    if isinstance(layer, str) and layer in names:
        return names.index(layer)
    raise LookupFailure(f"unknown layer {layer!r}; available: {', '.join(names)}")


def _check_input(model: Model, x):
    cfg = model.config
    expect = cfg.input_spatial + (cfg.in_channels,)
    values = x.values if isinstance(x, MatchTensor) else np.asarray(x)
    if values.shape[-5:] != expect:
        raise ModelError(f"tensor shape {values.shape} incompatible with model input {expect}")
    return values


def gradcams_batch(model: Model, tensors, target_class: int = RELEVANT):
    """Per-sample logits and per-layer CAMs for a batch of match tensors.

    Inference-mode normalisation keeps the samples independent, so one
    backward pass from the summed class logits yields every sample's
    gradients.
    """
    x = np.stack([_check_input(model, t) for t in tensors])
    trace = forward_trace(model, x, training=False)
    sel = np.zeros_like(trace.logits.value)
    sel[:, target_class] = 1.0
    y = tsum(trace.logits * sel)
    grads = backward(trace.tape, y)
    out_shape = model.config.input_spatial
    cams = []
    for i in range(x.shape[0]):
        cams.append([
            CamMap(name, gradcam_map(act.value[i], grads[act][i], out_shape))
            for name, act in zip(model.layer_names, trace.activations)
        ])
    return trace.logits.value.copy(), cams


def gradcam_layer(model: Model, t, layer, target_class: int = RELEVANT) -> CamMap:
    idx = _resolve_layer(model, layer)
    _, cams = gradcams_batch(model, [t], target_class)
    return cams[0][idx]


def aggregate_cams(maps) -> AggregatedCam:
    """Elementwise arithmetic mean of per-layer CAMs."""
    maps = list(maps)
    if not maps:
        raise ConfigError("no CAMs to aggregate")
    values = [np.asarray(getattr(m, "values", m), dtype=np.float64) for m in maps]
    shape = values[0].shape
    if any(v.shape != shape for v in values):
        raise DimensionError("CAMs must share one shape")
    total = np.zeros(shape)
    for v in values:
        total = total + v
    return AggregatedCam(total / len(values), len(values))


def decode(m_star) -> tuple[ContributionMap, ContributionMap]:
    """Contract the aggregated CAM onto target patches (P) and query patches (Q)."""
    m = np.asarray(getattr(m_star, "values", m_star), dtype=np.float64)
    if m.ndim != 4:
        raise DimensionError(f"aggregated CAM must have 4 modes, got {m.shape}")
    p = contract_double(m, np.ones(m.shape[2:]), (2, 3), (0, 1))
    q = contract_double(np.ones(m.shape[:2]), m, (0, 1), (0, 1))
    return ContributionMap("target", p), ContributionMap("query", q)


def _layer_normalize(cam: CamMap) -> CamMap:
    top = cam.values.max()
    return CamMap(cam.layer, cam.values / top if top > 0 else cam.values)


def heatmap(values, height: int, width: int, mode: str = "nearest") -> np.ndarray:
    """Max-normalised grayscale heatmap at source resolution, values in [0, 1]."""
    p = normalize_map(values)
    rows, cols = p.shape
    if mode == "nearest":
        ri = np.minimum((np.arange(height) * rows) // height, rows - 1)
        ci = np.minimum((np.arange(width) * cols) // width, cols - 1)
        return p[np.ix_(ri, ci)]
    if mode == "bilinear":
        return np.clip(rescale_nd(p, (height, width)), 0.0, 1.0)
    raise ConfigError(f"unknown upsampling mode {mode!r}")


def explain_batch(model: Model, tensors, normalize_layers: bool = True,
                  target_class: int = RELEVANT) -> list[Explanation]:
    logits, cams = gradcams_batch(model, tensors, target_class)
    out = []
    for z, layer_cams in zip(logits, cams):
        if normalize_layers:
            layer_cams = [_layer_normalize(c) for c in layer_cams]
        agg = aggregate_cams(layer_cams)
        p, q = decode(agg)
        out.append(Explanation(ClassScore(z), p, q, layer_cams, agg))
    return out


def explain_pair(model: Model, t, target_size=None, query_size=None, normalize_layers: bool = True,
                 upsample: str = "nearest") -> Explanation:
    """Score a pair and decode its evidence into P, Q and heatmaps.

    ``target_size`` / ``query_size`` are ``(height, width)`` of the source
    images; heatmaps default to one pixel per grid cell.
    """
    ex = explain_batch(model, [t], normalize_layers)[0]
    m, n = ex.P.values.shape
    th, tw = target_size or (m, n)
    qh, qw = query_size or (m, n)
    ex.heat_target = heatmap(ex.P.values, th, tw, upsample)
    ex.heat_query = heatmap(ex.Q.values, qh, qw, upsample)
    return ex


def write_map_csv(path, values) -> None:
    values = np.asarray(getattr(values, "values", values))
    with open(path, "w", encoding="utf-8") as fh:
        for row in values:
            fh.write(",".join(f"{v:.6g}" for v in row) + "\n")


def read_map_csv(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", ndmin=2)


def write_heatmap(path, heat) -> None:
    save_image(path, np.asarray(heat))
