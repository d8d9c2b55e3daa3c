"""4D residual verification network with hypersphere attention masks.

Each residual block ends with a hypersphere attention regulation (HAR)
layer, ``F_hat = F * theta + F``, where ``theta`` is a Gaussian over the
squared distance of every 4D coordinate to a learnable centre. The six
mask scalars per block get their gradients from :func:`har_gradients`,
not from generic tape ops.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nnops
from .errors import ConfigError, DimensionError, ParameterError
from .matchtensor import MatchTensor
from .ndtensor import GradTape, Var, backward, default_dtype, matmul, relu

logger = logging.getLogger(__name__)

SIGMA_MIN = 1e-3
RELEVANT = 1
IRRELEVANT = 0
_SQRT_2PI = math.sqrt(2.0 * math.pi)


# ---------------------------------------------------------------------------
# Hypersphere attention mask
# ---------------------------------------------------------------------------


@dataclass
class HarParams:
    center: np.ndarray
    mu: float
    sigma: float

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(-1)
        if self.center.size != 4:
            raise ParameterError(f"centre needs 4 coordinates, got {self.center.size}")

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.center, [self.mu, self.sigma]])

    @classmethod
    def from_vector(cls, v) -> "HarParams":
        v = np.asarray(v, dtype=np.float64).reshape(-1)
        if v.size != 6:
            raise ParameterError(f"HAR state has 6 scalars, got {v.size}")
        return cls(v[:4].copy(), float(v[4]), float(v[5]))

    @classmethod
    def initial(cls, shape) -> "HarParams":
        """Centre of the layer, zero mean, a quarter of the index-space diagonal."""
        ext = np.asarray(shape, dtype=np.float64)
        diag = float(np.sqrt(np.sum((ext - 1.0) ** 2)))
        return cls((ext - 1.0) / 2.0, 0.0, max(diag / 4.0, 0.5))


def _effective_sigma(sigma: float) -> float:
    if not np.isfinite(sigma) or sigma <= 0.0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    return max(float(sigma), SIGMA_MIN)


def _sq_distance(shape, center) -> tuple[np.ndarray, list[np.ndarray]]:
    if len(shape) != 4:
        raise DimensionError(f"HAR masks live on 4 spatial modes, got shape {tuple(shape)}")
    offsets = np.meshgrid(*(np.arange(n) - c for n, c in zip(shape, center)), indexing="ij")
    return sum(o * o for o in offsets), offsets


def har_mask(layer_shape, params: HarParams) -> np.ndarray:
    """Gaussian density of the squared distance of each coordinate to the centre."""
    sigma = _effective_sigma(params.sigma)
    d, _ = _sq_distance(layer_shape, params.center)
    return np.exp(-((d - params.mu) ** 2) / (2.0 * sigma * sigma)) / (_SQRT_2PI * sigma)


def _spatial_mask(mask: np.ndarray, f: np.ndarray) -> np.ndarray:
    if f.ndim == 4:
        if f.shape != mask.shape:
            raise DimensionError(f"mask {mask.shape} vs feature map {f.shape}")
        return mask
    if f.ndim < 5 or f.shape[-5:-1] != mask.shape:
        raise DimensionError(f"mask {mask.shape} does not match spatial modes of {f.shape}")
    return mask[..., None]


def har_apply(f, mask) -> np.ndarray:
    """``f * mask + f``, with the mask broadcast over any trailing channel axis."""
    f = np.asarray(f)
    m = _spatial_mask(np.asarray(mask), f)
    return f * m + f


def _reduce_to_spatial(x: np.ndarray) -> np.ndarray:
    if x.ndim == 4:
        return x
    x = x.sum(axis=-1)
    while x.ndim > 4:
        x = x.sum(axis=0)
    return x


def har_gradients(upstream, f, params: HarParams) -> dict:
    """Analytic gradients of a HAR layer.

    ``upstream`` is the gradient reaching the layer output. Returns the
    gradients for ``mu``, ``sigma``, ``center`` (4-vector) and the input
    feature map ``f``. The centre gradient uses the vector derivative of the
    squared distance, ``-2 (x - c)``.
    """
    upstream = np.asarray(upstream)
    f = np.asarray(f)
    if upstream.shape != f.shape:
        raise DimensionError(f"upstream {upstream.shape} vs feature map {f.shape}")
    spatial = f.shape if f.ndim == 4 else f.shape[-5:-1]
    sigma = _effective_sigma(params.sigma)
    d, offsets = _sq_distance(spatial, params.center)
    theta = np.exp(-((d - params.mu) ** 2) / (2.0 * sigma * sigma)) / (_SQRT_2PI * sigma)
    g_theta = _reduce_to_spatial(upstream * f)
    gt = g_theta * theta
    dev = d - params.mu
    g_mu = float(np.sum(gt * dev)) / sigma**2
    g_sigma = float(np.sum(gt * (dev * dev - sigma * sigma))) / sigma**3
    if params.sigma < SIGMA_MIN:
        g_sigma = 0.0
    g_center = np.array([2.0 / sigma**2 * float(np.sum(gt * dev * o)) for o in offsets])
    g_f = upstream * (1.0 + _spatial_mask(theta, f))
    return {"mu": g_mu, "sigma": g_sigma, "center": g_center, "F": g_f, "theta": g_theta}


def har_layer(f: Var, p: Var) -> Var:
    """Tape op applying a HAR mask whose 6 scalars live in node ``p``."""
    params = HarParams.from_vector(p.value)
    mask = har_mask(f.shape[-5:-1], params)
    fv = f.value

    def vjp(g):
        gr = har_gradients(g, fv, params)
        gp = np.concatenate([gr["center"], [gr["mu"], gr["sigma"]]])
        return gr["F"], gp

    return f.tape.record(har_apply(fv, mask), (f, p), vjp)


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelConfig:
    grid_rows: int = 7
    grid_cols: int = 7
    in_channels: int = 3
    channels: tuple = (8, 16, 32, 32)
    strides: tuple = (1, 2, 2, 1)
    kernel: int = 3
    har_enabled: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "strides", tuple(int(s) for s in self.strides))
        if len(self.channels) < 1:
            raise ConfigError("at least one block is required")
        if len(self.strides) != len(self.channels):
            raise ConfigError("one stride per block is required")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError(f"kernel side must be odd, got {self.kernel}")
        if any(s < 1 for s in self.strides):
            raise ConfigError("strides must be >= 1")
        if self.in_channels < 1 or any(c < 1 for c in self.channels):
            raise ConfigError("channel counts must be positive")

    @property
    def blocks(self) -> int:
        return len(self.channels)

    @property
    def input_spatial(self) -> tuple:
        return (self.grid_rows, self.grid_cols, self.grid_rows, self.grid_cols)

    def layer_shapes(self) -> list[tuple]:
        shapes, cur = [], self.input_spatial
        pad = self.kernel // 2
        for s in self.strides:
            cur = tuple((n + 2 * pad - self.kernel) // s + 1 for n in cur)
            shapes.append(cur)
        return shapes

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["strides"] = list(self.strides)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass(frozen=True)
class ClassScore:
    logits: np.ndarray

    @property
    def probabilities(self) -> np.ndarray:
        return nnops.softmax(self.logits)

    @property
    def relevance(self) -> float:
        return float(self.probabilities[RELEVANT])


@dataclass
class Model:
    """Parameters (learned), buffers (running statistics) and config."""

    config: ModelConfig
    params: dict = field(default_factory=dict)
    buffers: dict = field(default_factory=dict)

    @classmethod
    def init(cls, config: ModelConfig, zero_head: bool = False) -> "Model":
        rng = np.random.default_rng(config.seed)
        dt = default_dtype()
        k, nd = config.kernel, 4
        params, buffers = {}, {}
        cin = config.in_channels
        for b, (cout, shape) in enumerate(zip(config.channels, config.layer_shapes())):
            pre = f"block{b}"
            fan1, fan2 = k**nd * cin, k**nd * cout
            params[f"{pre}.conv1.w"] = rng.normal(0, math.sqrt(2.0 / fan1), (k,) * nd + (cin, cout)).astype(dt)
            params[f"{pre}.conv1.b"] = np.zeros(cout, dt)
            params[f"{pre}.norm1.gamma"] = np.ones(cout, dt)
            params[f"{pre}.norm1.beta"] = np.zeros(cout, dt)
            params[f"{pre}.conv2.w"] = rng.normal(0, math.sqrt(2.0 / fan2), (k,) * nd + (cout, cout)).astype(dt)
            params[f"{pre}.conv2.b"] = np.zeros(cout, dt)
            params[f"{pre}.norm2.gamma"] = np.ones(cout, dt)
            params[f"{pre}.norm2.beta"] = np.zeros(cout, dt)
            if cin != cout or config.strides[b] != 1:
                params[f"{pre}.proj.w"] = rng.normal(0, math.sqrt(2.0 / cin), (cin, cout)).astype(dt)
            for n in (1, 2):
                buffers[f"{pre}.norm{n}.mean"] = np.zeros(cout, dt)
                buffers[f"{pre}.norm{n}.var"] = np.ones(cout, dt)
            params[f"{pre}.har"] = HarParams.initial(shape).to_vector().astype(np.float64)
            cin = cout
        if zero_head:
            params["head.w"] = np.zeros((cin, 2), dt)
        else:
            params["head.w"] = rng.normal(0, 0.1 / math.sqrt(cin), (cin, 2)).astype(dt)
        params["head.b"] = np.zeros(2, dt)
        return cls(config, params, buffers)

    def copy(self) -> "Model":
        return copy.deepcopy(self)

    def har_params(self, block: int) -> HarParams:
        return HarParams.from_vector(self.params[f"block{block}.har"])

    def set_har_params(self, block: int, p: HarParams) -> None:
        self.params[f"block{block}.har"] = p.to_vector()

    @property
    def layer_names(self) -> list[str]:
        return [f"block{b}" for b in range(self.config.blocks)]


def _as_batch(model: Model, x) -> np.ndarray:
    if isinstance(x, MatchTensor):
        x = x.values
    x = np.asarray(x, dtype=default_dtype())
    cfg = model.config
    expect = cfg.input_spatial + (cfg.in_channels,)
    if x.shape == expect:
        x = x[None]
    if x.shape[1:] != expect:
        raise DimensionError(f"input shape {x.shape} does not match model input {expect}")
    return x


@dataclass
class ForwardTrace:
    tape: GradTape
    logits: Var
    activations: list          # post-HAR block outputs (Var)
    param_vars: dict
    batch_stats: dict


def forward_trace(model: Model, x, training: bool = False) -> ForwardTrace:
    """Forward pass recorded on a fresh tape."""
    x = _as_batch(model, x)
    cfg = model.config
    tape = GradTape()
    pv = {name: tape.leaf(value) for name, value in model.params.items()}
    stats = {}

    def norm(h, name):
        if training:
            out, mean, var = nnops.batch_norm(h, pv[f"{name}.gamma"], pv[f"{name}.beta"])
            stats[name] = (mean, var, int(np.prod(h.shape[:-1])))
            return out
        return nnops.affine_norm(h, pv[f"{name}.gamma"], pv[f"{name}.beta"],
                                 model.buffers[f"{name}.mean"], model.buffers[f"{name}.var"])

    h = tape.constant(x)
    acts = []
    for b, stride in enumerate(cfg.strides):
        pre = f"block{b}"
        y = nnops.conv_nd(h, pv[f"{pre}.conv1.w"], pv[f"{pre}.conv1.b"], stride)
        y = relu(norm(y, f"{pre}.norm1"))
        y = nnops.conv_nd(y, pv[f"{pre}.conv2.w"], pv[f"{pre}.conv2.b"], 1)
        y = norm(y, f"{pre}.norm2")
        skip = h
        if f"{pre}.proj.w" in pv:
            sub = nnops.subsample(h, stride)
            skip = sub_proj(sub, pv[f"{pre}.proj.w"])
        h = relu(y + skip)
        if cfg.har_enabled:
            h = har_layer(h, pv[f"{pre}.har"])
        acts.append(h)
    pooled = nnops.global_avg_pool(h)
    logits = matmul(pooled, pv["head.w"]) + pv["head.b"]
    return ForwardTrace(tape, logits, acts, pv, stats)


def sub_proj(x: Var, w: Var) -> Var:
    """1x1 projection on the channel axis."""
    xv, wv = x.value, w.value
    flat = xv.reshape(-1, xv.shape[-1])

    def vjp(g):
        g2 = g.reshape(-1, g.shape[-1])
        return (g2 @ wv.T).reshape(xv.shape), flat.T @ g2

    return x.tape.record((flat @ wv).reshape(xv.shape[:-1] + (wv.shape[-1],)), (x, w), vjp)


def forward(model: Model, t) -> tuple[ClassScore, list[np.ndarray]]:
    """Inference on one pair; returns the score and every block's activation."""
    trace = forward_trace(model, t, training=False)
    return ClassScore(trace.logits.value[0].copy()), [a.value[0] for a in trace.activations]


def predict_proba(model: Model, tensors, batch_size: int = 32) -> np.ndarray:
    """Probability of the relevant class for each input tensor."""
    tensors = list(tensors)
    out = np.empty(len(tensors))
    for start in range(0, len(tensors), batch_size):
        chunk = tensors[start:start + batch_size]
        x = np.stack([_as_batch(model, t)[0] for t in chunk])
        logits = forward_trace(model, x).logits.value
        out[start:start + len(chunk)] = nnops.softmax(logits)[:, RELEVANT]
    return out


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    cosine_decay: bool = True
    norm_momentum: float = 0.1
    seed: int = 0


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss: float
    accuracy: float
    val_loss: float = float("nan")
    val_accuracy: float = float("nan")


@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    best_epoch: int = -1
    first_batch_loss: float = float("nan")

    def to_csv(self) -> str:
        lines = ["epoch,lr,loss,accuracy,val_loss,val_accuracy"]
        for r in self.records:
            lines.append(f"{r.epoch},{r.lr:.6g},{r.loss:.6f},{r.accuracy:.6f},{r.val_loss:.6f},{r.val_accuracy:.6f}")
        return "\n".join(lines) + "\n"


def _epoch_items(pairs, epoch, rng):
    items = pairs(epoch, rng) if callable(pairs) else pairs
    return [(t.values if isinstance(t, MatchTensor) else np.asarray(t), int(y)) for t, y in items]


def evaluate_pairs(model: Model, items, batch_size: int = 32) -> tuple[float, float]:
    """Mean cross-entropy and accuracy in inference mode."""
    if not items:
        return float("nan"), float("nan")
    probs = predict_proba(model, [t for t, _ in items], batch_size)
    y = np.array([lab for _, lab in items])
    p = np.clip(np.where(y == RELEVANT, probs, 1.0 - probs), 1e-300, 1.0)
    acc = float(np.mean((probs >= 0.5) == (y == RELEVANT)))
    return float(-np.mean(np.log(p))), acc


def train(model: Model, pairs, config: TrainConfig = TrainConfig(), val_pairs=None):
    """Mini-batch SGD with momentum on softmax cross-entropy.

    ``pairs`` is a list of ``(tensor, label)`` or a callable
    ``(epoch, rng) -> list`` that is resampled every epoch. Returns the
    checkpoint with the lowest validation loss (training loss when no
    validation pairs are given) and the per-epoch log.
    """
    model = model.copy()
    rng = np.random.default_rng(config.seed)
    velocity = {k: np.zeros_like(v) for k, v in model.params.items()}
    val_items = _epoch_items(val_pairs, 0, rng) if val_pairs is not None else []
    log = TrainLog()
    best, best_loss = model.copy(), float("inf")

    for epoch in range(config.epochs):
        items = _epoch_items(pairs, epoch, rng)
        labels = {y for _, y in items}
        if labels != {RELEVANT, IRRELEVANT}:
            raise ConfigError("training pairs must contain both relevant and irrelevant labels")
        order = rng.permutation(len(items))
        lr = config.lr
        if config.cosine_decay and config.epochs > 1:
            lr = config.lr * 0.5 * (1.0 + math.cos(math.pi * epoch / config.epochs))
        tot_loss, correct = 0.0, 0
        for start in range(0, len(items), config.batch_size):
            batch = [items[i] for i in order[start:start + config.batch_size]]
            x = np.stack([t for t, _ in batch]).astype(default_dtype())
            y = np.array([lab for _, lab in batch])
            trace = forward_trace(model, x, training=len(batch) > 1)
            loss = nnops.softmax_cross_entropy(trace.logits, y)
            if np.isnan(log.first_batch_loss):
                log.first_batch_loss = float(loss.value)
            grads = backward(trace.tape, loss)
            tot_loss += float(loss.value) * len(batch)
            correct += int(np.sum(np.argmax(trace.logits.value, axis=1) == y))
            _sgd_step(model, trace, grads, velocity, lr, config)
            _update_running_stats(model, trace.batch_stats, config.norm_momentum)
        rec = EpochRecord(epoch, lr, tot_loss / len(items), correct / len(items))
        if val_items:
            rec.val_loss, rec.val_accuracy = evaluate_pairs(model, val_items)
            score = rec.val_loss
        else:
            score = rec.loss
        log.records.append(rec)
        logger.info("epoch %d lr %.4g loss %.4f acc %.3f val_loss %.4f val_acc %.3f",
                    epoch, lr, rec.loss, rec.accuracy, rec.val_loss, rec.val_accuracy)
        if score < best_loss:
            best_loss, best = score, model.copy()
            log.best_epoch = epoch
    return best, log


def _sgd_step(model, trace, grads, velocity, lr, config):
    for name, var in trace.param_vars.items():
        g = grads[var]
        if config.weight_decay and not name.endswith(".har"):
            g = g + config.weight_decay * model.params[name]
        v = velocity[name]
        v *= config.momentum
        v += g
        if lr != 0.0:
            model.params[name] = model.params[name] - lr * v
    for b in range(model.config.blocks):
        vec = model.params[f"block{b}.har"]
        if vec[4] < 0.0 or vec[5] < SIGMA_MIN:
            vec = vec.copy()
            vec[4] = max(vec[4], 0.0)
            vec[5] = max(vec[5], SIGMA_MIN)
            model.params[f"block{b}.har"] = vec


def _update_running_stats(model, stats, momentum):
    for name, (mean, var, count) in stats.items():
        unbiased = var * count / max(count - 1, 1)
        model.buffers[f"{name}.mean"] = (1 - momentum) * model.buffers[f"{name}.mean"] + momentum * mean
        model.buffers[f"{name}.var"] = (1 - momentum) * model.buffers[f"{name}.var"] + momentum * unbiased


def parameter_count(model: Model) -> int:
    return int(sum(v.size for v in model.params.values()))
