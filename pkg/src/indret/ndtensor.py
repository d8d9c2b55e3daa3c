"""Dense N-d tensor helpers and a small reverse-mode gradient tape.

Tensors are plain row-major numpy arrays. Differentiable computations go
through :class:`GradTape`: every op appends a node holding its value, the
indices of its parents and a vector-Jacobian closure. ``backward`` walks
the nodes once in reverse order.
"""

from __future__ import annotations

import io
import itertools
import struct
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, PersistenceError

_DTYPE = np.float64


def set_precision(bits: int) -> None:
    """Select the global float width (64 by default, 32 opt-in)."""
    global _DTYPE
    if bits == 64:
        _DTYPE = np.float64
    elif bits == 32:
        _DTYPE = np.float32
    else:
        raise ValueError(f"unsupported precision: {bits}")


def default_dtype():
    return _DTYPE


def asarray(x) -> np.ndarray:
    return np.asarray(x, dtype=_DTYPE)


# ---------------------------------------------------------------------------
# Gradient tape
# ---------------------------------------------------------------------------


class _Node:
    __slots__ = ("value", "parents", "vjp", "requires_grad")

    def __init__(self, value, parents, vjp, requires_grad):
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.requires_grad = requires_grad


class GradTape:
    """Append-only record of one forward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value, requires_grad: bool = True) -> "Var":
        self.nodes.append(_Node(np.asarray(value), (), None, requires_grad))
        return Var(self, len(self.nodes) - 1)

    def constant(self, value) -> "Var":
        return self.leaf(value, requires_grad=False)

    def record(self, value, parents: Sequence["Var"], vjp) -> "Var":
        idx = []
        for p in parents:
            if p.tape is not self:
                raise ContractError("operands belong to different tapes")
            idx.append(p.index)
        req = any(self.nodes[i].requires_grad for i in idx)
        self.nodes.append(_Node(value, tuple(idx), vjp if req else None, req))
        return Var(self, len(self.nodes) - 1)


class Var:
    """Handle to a node on a tape."""

    __slots__ = ("tape", "index")

    def __init__(self, tape: GradTape, index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.index].value

    @property
    def shape(self):
        return self.value.shape

    @property
    def requires_grad(self) -> bool:
        return self.tape.nodes[self.index].requires_grad

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        return f"Var(#{self.index}, shape={self.shape})"


class Gradients:
    """Result of :func:`backward`; absent entries read as zeros."""

    def __init__(self, tape: GradTape, grads: list):
        self._tape = tape
        self._grads = grads

    def __getitem__(self, var: Var) -> np.ndarray:
        g = self._grads[var.index]
        if g is None:
            return np.zeros_like(self._tape.nodes[var.index].value)
        return g

    def reached(self, var: Var) -> bool:
        return self._grads[var.index] is not None


def backward(tape: GradTape, loss: Var) -> Gradients:
    """Reverse sweep from a scalar ``loss`` node."""
    value = tape.nodes[loss.index].value
    if value.size != 1:
        raise ContractError(f"loss must be scalar, got shape {value.shape}")
    grads: list = [None] * len(tape.nodes)
    grads[loss.index] = np.ones_like(value)
    for i in range(loss.index, -1, -1):
        g = grads[i]
        node = tape.nodes[i]
        if g is None or node.vjp is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None or not tape.nodes[parent].requires_grad:
                continue
            if grads[parent] is None:
                grads[parent] = pg
            else:
                grads[parent] = grads[parent] + pg
    return Gradients(tape, grads)


def _tape_of(*xs) -> GradTape | None:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    return None


def _lift(tape: GradTape, x) -> Var:
    return x if isinstance(x, Var) else tape.constant(asarray(x))


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Elementwise and reduction ops (array or Var operands)
# ---------------------------------------------------------------------------


def add(a, b):
    tape = _tape_of(a, b)
    if tape is None:
        return np.add(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    sa, sb = a.shape, b.shape
    return tape.record(
        a.value + b.value,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def sub(a, b):
    tape = _tape_of(a, b)
    if tape is None:
        return np.subtract(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    sa, sb = a.shape, b.shape
    return tape.record(
        a.value - b.value,
        (a, b),
        lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)),
    )


def mul(a, b):
    """Broadcasting product; see :func:`hadamard` for the strict form."""
    tape = _tape_of(a, b)
    if tape is None:
        return np.multiply(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    av, bv = a.value, b.value
    return tape.record(
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def hadamard(a, b):
    """Elementwise product of two tensors of identical shape."""
    sa = a.shape if isinstance(a, Var) else np.shape(a)
    sb = b.shape if isinstance(b, Var) else np.shape(b)
    if tuple(sa) != tuple(sb):
        raise DimensionError(f"hadamard shape mismatch: {sa} vs {sb}")
    return mul(a, b)


def scale(a, k: float):
    if not isinstance(a, Var):
        return np.multiply(a, k)
    return a.tape.record(a.value * k, (a,), lambda g: (g * k,))


def tsum(a, axis=None, keepdims=False):
    if not isinstance(a, Var):
        return np.sum(a, axis=axis, keepdims=keepdims)
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return a.tape.record(np.sum(a.value, axis=axis, keepdims=keepdims), (a,), vjp)


def tmean(a, axis=None, keepdims=False):
    shape = a.shape if isinstance(a, Var) else np.shape(a)
    if axis is None:
        count = int(np.prod(shape))
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([shape[ax] for ax in axes]))
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape):
    if not isinstance(a, Var):
        return np.reshape(a, shape)
    old = a.shape
    return a.tape.record(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def relu(a):
    if not isinstance(a, Var):
        return np.maximum(a, 0)
    mask = a.value > 0
    return a.tape.record(np.where(mask, a.value, 0), (a,), lambda g: (g * mask,))


def exp(a):
    if not isinstance(a, Var):
        return np.exp(a)
    out = np.exp(a.value)
    return a.tape.record(out, (a,), lambda g: (g * out,))


def matmul(a, b):
    tape = _tape_of(a, b)
    if tape is None:
        return np.matmul(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    av, bv = a.value, b.value
    return tape.record(
        av @ bv,
        (a, b),
        lambda g: (g @ bv.T, av.T @ g),
    )


# ---------------------------------------------------------------------------
# Double contraction
# ---------------------------------------------------------------------------


def contract_double(a, b, modes_a=(2, 3), modes_b=(0, 1)):
    """Inner product of two modes of ``a`` with two modes of ``b``.

    Modes are 0-based. The result keeps the free modes of ``a`` followed by
    the free modes of ``b``.
    """
    sa = a.shape if isinstance(a, Var) else np.shape(a)
    sb = b.shape if isinstance(b, Var) else np.shape(b)
    modes_a = tuple(int(m) for m in modes_a)
    modes_b = tuple(int(m) for m in modes_b)
    if len(modes_a) != 2 or len(modes_b) != 2:
        raise DimensionError("double contraction needs exactly two modes per operand")
    try:
        ext_a = [sa[m] for m in modes_a]
        ext_b = [sb[m] for m in modes_b]
    except IndexError as exc:
        raise DimensionError(f"contraction mode out of range: {exc}") from None
    if ext_a != ext_b:
        raise DimensionError(f"contracted extents differ: {ext_a} vs {ext_b}")

    tape = _tape_of(a, b)
    if tape is None:
        return np.tensordot(asarray(a), asarray(b), axes=(modes_a, modes_b))

    a, b = _lift(tape, a), _lift(tape, b)
    av, bv = a.value, b.value
    free_a = [m for m in range(av.ndim) if m not in modes_a]
    free_b = [m for m in range(bv.ndim) if m not in modes_b]
    out = np.tensordot(av, bv, axes=(modes_a, modes_b))

    def vjp(g):
        na = len(free_a)
        g_axes_a = list(range(na))
        g_axes_b = list(range(na, g.ndim))
        # ga[free_a..., modes_a...] = sum over free_b of g * b
        ga = np.tensordot(g, bv, axes=(g_axes_b, free_b))
        ga = np.moveaxis(ga, range(ga.ndim), free_a + list(modes_a))
        gb = np.tensordot(av, g, axes=(free_a, g_axes_a))
        gb = np.moveaxis(gb, range(gb.ndim), list(modes_b) + free_b)
        return ga, gb

    return tape.record(out, (a, b), vjp)


# ---------------------------------------------------------------------------
# Multilinear rescaling
# ---------------------------------------------------------------------------


def _linear_axis(src: int, dst: int):
    # half-pixel centres, clamped at the edges
    x = (np.arange(dst) + 0.5) * (src / dst) - 0.5
    x = np.clip(x, 0.0, src - 1)
    i0 = np.floor(x).astype(np.intp)
    i1 = np.minimum(i0 + 1, src - 1)
    w = x - i0
    return i0, i1, w


def rescale_nd(a, target_shape) -> np.ndarray:
    """Multilinear resize of every mode to ``target_shape``."""
    a = np.asarray(a)
    target_shape = tuple(int(n) for n in target_shape)
    if a.ndim != len(target_shape):
        raise DimensionError(f"rank mismatch: {a.ndim} vs {len(target_shape)}")
    if any(n < 1 for n in target_shape):
        raise DimensionError(f"extents must be positive: {target_shape}")
    out = a.astype(_DTYPE, copy=True)
    for ax, dst in enumerate(target_shape):
        src = out.shape[ax]
        if src == dst:
            continue
        i0, i1, w = _linear_axis(src, dst)
        bshape = [1] * out.ndim
        bshape[ax] = dst
        w = w.reshape(bshape).astype(out.dtype)
        out = np.take(out, i0, axis=ax) * (1.0 - w) + np.take(out, i1, axis=ax) * w
    return out


# ---------------------------------------------------------------------------
# Binary dump: b"NDT1", u8 rank, u32 extents, little-endian f64 payload
# ---------------------------------------------------------------------------

NDT_MAGIC = b"NDT1"


def tensor_to_bytes(a) -> bytes:
    a = np.asarray(a, dtype="<f8")
    if a.ndim == 0:
        a = a.reshape(1)
    if a.ndim > 255:
        raise DimensionError("rank exceeds 255")
    head = NDT_MAGIC + struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return head + np.ascontiguousarray(a).tobytes()


def read_tensor(stream) -> np.ndarray:
    """Read one tensor from a binary stream positioned at its magic."""
    magic = stream.read(4)
    if magic != NDT_MAGIC:
        raise PersistenceError(f"bad tensor magic {magic!r}")
    raw = stream.read(1)
    if len(raw) != 1:
        raise PersistenceError("truncated tensor header")
    rank = raw[0]
    raw = stream.read(4 * rank)
    if len(raw) != 4 * rank:
        raise PersistenceError("truncated tensor header")
    shape = struct.unpack(f"<{rank}I", raw)
    if any(n < 1 for n in shape):
        raise PersistenceError(f"invalid extents {shape}")
    nbytes = 8 * int(np.prod(shape))
    payload = stream.read(nbytes)
    if len(payload) != nbytes:
        raise PersistenceError("truncated tensor payload")
    return np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)


def tensor_from_bytes(data: bytes) -> np.ndarray:
    return read_tensor(io.BytesIO(data))


def dump_tensor(path, a) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(a))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)


# ---------------------------------------------------------------------------
# Finite differences (shared by gradient checks)
# ---------------------------------------------------------------------------


def central_difference(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5):
    """Central finite-difference gradient of scalar ``f`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for idx in itertools.product(*(range(n) for n in x.shape)):
        orig = x[idx]
        x[idx] = orig + h
        fp = f(x)
        x[idx] = orig - h
        fm = f(x)
        x[idx] = orig
        g[idx] = (fp - fm) / (2 * h)
    return g
