"""Differentiable layer primitives on top of the gradient tape.

Feature maps are channel-last: ``(batch, *spatial, channels)``.
"""

from __future__ import annotations

import itertools

import numpy as np

from .errors import DimensionError
from .ndtensor import Var


def _conv_geometry(spatial, k, stride):
    pad = k // 2
    return pad, tuple((n + 2 * pad - k) // stride + 1 for n in spatial)


def _window(offset, out_spatial, stride):
    return tuple(slice(o, o + stride * (n - 1) + 1, stride) for o, n in zip(offset, out_spatial))


def conv_nd(x: Var, w: Var, b: Var | None = None, stride: int = 1) -> Var:
    """Same-padded N-d convolution (cross-correlation) with odd kernels.

    ``w`` has shape ``(k, ..., k, c_in, c_out)``; one matmul per kernel
    offset keeps the memory footprint at a single shifted view.
    """
    xv, wv = x.value, w.value
    nd = xv.ndim - 2
    k = wv.shape[0]
    if wv.ndim != nd + 2 or any(s != k for s in wv.shape[:nd]):
        raise DimensionError(f"kernel {wv.shape} does not fit input {xv.shape}")
    if k % 2 == 0:
        raise DimensionError("kernel side must be odd")
    if wv.shape[-2] != xv.shape[-1]:
        raise DimensionError(f"channel mismatch: input {xv.shape[-1]}, kernel {wv.shape[-2]}")
    pad, out_spatial = _conv_geometry(xv.shape[1:-1], k, stride)
    xp = np.pad(xv, [(0, 0)] + [(pad, pad)] * nd + [(0, 0)])
    offsets = list(itertools.product(range(k), repeat=nd))
    out = np.zeros((xv.shape[0],) + out_spatial + (wv.shape[-1],), dtype=xv.dtype)
    lead = (slice(None),)
    for off in offsets:
        out += xp[lead + _window(off, out_spatial, stride)] @ wv[off]
    parents = (x, w)
    if b is not None:
        out += b.value
        parents = (x, w, b)

    def vjp(g):
        gw = np.empty_like(wv)
        g2 = g.reshape(-1, g.shape[-1])
        cin = xv.shape[-1]
        for off in offsets:
            gw[off] = xp[lead + _window(off, out_spatial, stride)].reshape(-1, cin).T @ g2
        grads = [_conv_input_grad(g, wv, xv.shape, xp.shape, offsets, out_spatial, stride, pad)
                 if x.requires_grad else None, gw]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return x.tape.record(out, parents, vjp)


def _conv_input_grad(g, wv, x_shape, xp_shape, offsets, out_spatial, stride, pad):
    lead = (slice(None),)
    if stride == 1:
        # transposed convolution: correlate the padded gradient with the flipped kernel
        k = wv.shape[0]
        gp = np.pad(g, [(0, 0)] + [(pad, pad)] * (g.ndim - 2) + [(0, 0)])
        gx = np.zeros(x_shape, dtype=g.dtype)
        spatial = x_shape[1:-1]
        for off in offsets:
            flip = tuple(k - 1 - o for o in off)
            gx += gp[lead + _window(flip, spatial, 1)] @ wv[off].T
        return gx
    gxp = np.zeros(xp_shape, dtype=g.dtype)
    for off in offsets:
        gxp[lead + _window(off, out_spatial, stride)] += g @ wv[off].T
    return gxp[lead + tuple(slice(pad, pad + n) for n in x_shape[1:-1])]


def batch_norm(x: Var, gamma: Var, beta: Var, eps: float = 1e-5):
    """Per-channel normalisation with batch statistics.

    Returns the output node plus the batch mean and (biased) variance so
    the caller can update running statistics.
    """
    xv = x.value
    axes = tuple(range(xv.ndim - 1))
    count = int(np.prod([xv.shape[a] for a in axes]))
    mean = xv.mean(axis=axes)
    var = xv.var(axis=axes)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mean) * inv
    gv = gamma.value

    def vjp(g):
        gxhat = g * gv
        s1 = gxhat.sum(axis=axes)
        s2 = (gxhat * xhat).sum(axis=axes)
        gx = (inv / count) * (count * gxhat - s1 - xhat * s2)
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    out = x.tape.record(gv * xhat + beta.value, (x, gamma, beta), vjp)
    return out, mean, var


def affine_norm(x: Var, gamma: Var, beta: Var, mean, var, eps: float = 1e-5) -> Var:
    """Normalisation with frozen statistics (inference mode)."""
    xv = x.value
    axes = tuple(range(xv.ndim - 1))
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mean) * inv
    gv = gamma.value

    def vjp(g):
        return g * (gv * inv), (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return x.tape.record(gv * xhat + beta.value, (x, gamma, beta), vjp)


def subsample(x: Var, stride: int) -> Var:
    """Take every ``stride``-th element on each spatial mode."""
    if stride == 1:
        return x
    xv = x.value
    win = (slice(None),) + (slice(None, None, stride),) * (xv.ndim - 2) + (slice(None),)

    def vjp(g):
        gx = np.zeros_like(xv)
        gx[win] = g
        return (gx,)

    return x.tape.record(xv[win], (x,), vjp)


def global_avg_pool(x: Var) -> Var:
    xv = x.value
    axes = tuple(range(1, xv.ndim - 1))
    count = int(np.prod([xv.shape[a] for a in axes]))
    shape = xv.shape

    def vjp(g):
        g = g.reshape((shape[0],) + (1,) * len(axes) + (shape[-1],))
        return (np.broadcast_to(g / count, shape).copy(),)

    return x.tape.record(xv.mean(axis=axes), (x,), vjp)


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Var, labels) -> Var:
    """Mean cross-entropy of integer ``labels`` under softmax(logits)."""
    z = logits.value
    labels = np.asarray(labels, dtype=np.intp)
    n = z.shape[0]
    shifted = z - z.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), labels].mean()

    def vjp(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (p * (g / n),)

    return logits.tape.record(np.asarray(loss), (logits,), vjp)
