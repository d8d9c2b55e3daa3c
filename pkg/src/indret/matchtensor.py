"""Patch-pair correlation views and the stacked multi-view match tensor."""

from __future__ import annotations

import enum
import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from .errors import ConfigError, DimensionError, PersistenceError
from .ndtensor import read_tensor, tensor_to_bytes
from .patching import GridSpec, PatchGrid


class MetricKind(enum.Enum):
    COSINE = "cosine"
    EUCLIDEAN = "euclidean"
    MANHATTAN = "manhattan"
    MAHALANOBIS = "mahalanobis"

    @classmethod
    def parse(cls, text: str) -> "MetricKind":
        aliases = {"cos": "cosine", "l2": "euclidean", "l1": "manhattan", "maha": "mahalanobis"}
        key = text.strip().lower()
        try:
            return cls(aliases.get(key, key))
        except ValueError:
            raise ConfigError(f"unknown metric {text!r}") from None


DEFAULT_METRICS = (MetricKind.COSINE, MetricKind.EUCLIDEAN, MetricKind.MANHATTAN)


def parse_metrics(text: str) -> tuple[MetricKind, ...]:
    return tuple(MetricKind.parse(t) for t in text.split(",") if t.strip())


def estimate_inverse_variance(vectors, ridge: float = 1e-6) -> np.ndarray:
    """Diagonal Mahalanobis weights from a stack of patch vectors."""
    v = np.asarray(vectors, dtype=np.float64).reshape(-1, np.shape(vectors)[-1])
    return 1.0 / (v.var(axis=0) + ridge)


def patch_similarity(p, q, metric: MetricKind, inv_var=None) -> float:
    """Similarity of two patch vectors.

    Cosine lies in [-1, 1] (0 when either vector is all-zero); distances
    are mapped to ``1 / (1 + d)``.
    """
    p = np.asarray(p, dtype=np.float64).ravel()
    q = np.asarray(q, dtype=np.float64).ravel()
    if p.shape != q.shape:
        raise DimensionError(f"patch lengths differ: {p.size} vs {q.size}")
    if metric is MetricKind.COSINE:
        np_, nq = np.sqrt(np.sum(p * p)), np.sqrt(np.sum(q * q))
        if np_ == 0.0 or nq == 0.0:
            return 0.0
        return float(np.clip(np.sum(p * q) / (np_ * nq), -1.0, 1.0))
    diff = p - q
    if metric is MetricKind.EUCLIDEAN:
        d = np.sqrt(np.sum(diff * diff))
    elif metric is MetricKind.MANHATTAN:
        d = np.sum(np.abs(diff))
    elif metric is MetricKind.MAHALANOBIS:
        if inv_var is None:
            raise ConfigError("Mahalanobis similarity needs an inverse-variance vector")
        d = np.sqrt(np.sum(diff * diff * np.asarray(inv_var)))
    else:  # pragma: no cover
        raise ConfigError(f"unsupported metric {metric}")
    return float(1.0 / (1.0 + d))


def center_patches(vectors: np.ndarray) -> np.ndarray:
    return vectors - vectors.mean(axis=-1, keepdims=True)


def _similarity_matrix(a: np.ndarray, b: np.ndarray, metric: MetricKind, inv_var, center_cosine):
    """All-pairs similarity between rows of ``a`` and rows of ``b``."""
    if metric is MetricKind.COSINE:
        if center_cosine:
            a, b = center_patches(a), center_patches(b)
        na = np.sqrt(np.sum(a * a, axis=1))
        nb = np.sqrt(np.sum(b * b, axis=1))
        denom = np.outer(na, nb)
        with np.errstate(invalid="ignore", divide="ignore"):
            sim = np.where(denom > 0, (a @ b.T) / denom, 0.0)
        return np.clip(sim, -1.0, 1.0)
    if metric is MetricKind.EUCLIDEAN:
        d = cdist(a, b, "euclidean")
    elif metric is MetricKind.MANHATTAN:
        d = cdist(a, b, "cityblock")
    elif metric is MetricKind.MAHALANOBIS:
        if inv_var is None:
            raise ConfigError("Mahalanobis similarity needs an inverse-variance vector")
        w = np.sqrt(np.asarray(inv_var, dtype=np.float64))
        d = cdist(a * w, b * w, "euclidean")
    else:  # pragma: no cover
        raise ConfigError(f"unsupported metric {metric}")
    return 1.0 / (1.0 + d)


@dataclass(frozen=True)
class ViewTensor:
    metric: MetricKind
    values: np.ndarray


@dataclass(frozen=True)
class MatchTensor:
    """Order-5 tensor ``(m, n, m, n, views)``; target modes first, query modes second."""

    values: np.ndarray
    metrics: tuple[MetricKind, ...]
    target_id: str = ""
    query_id: str = ""
    spec: GridSpec | None = field(default=None, compare=False)

    @property
    def views(self) -> list[ViewTensor]:
        return [ViewTensor(m, self.values[..., v]) for v, m in enumerate(self.metrics)]

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.values.shape[0], self.values.shape[1]

    def with_values(self, values) -> "MatchTensor":
        return MatchTensor(np.asarray(values), self.metrics, self.target_id, self.query_id, self.spec)


def _check_pair(target: PatchGrid, query: PatchGrid):
    if target.spec != query.spec:
        raise DimensionError(f"grid specs differ: {target.spec} vs {query.spec}")
    if target.patch_length != query.patch_length:
        raise DimensionError(f"patch lengths differ: {target.patch_length} vs {query.patch_length}")


def _views(target, query, metrics, inv_var, center_cosine):
    _check_pair(target, query)
    a, b = target.flat(), query.flat()
    # fixed evaluation orientation makes R_AB and R_BA bitwise transposes
    flipped = a.tobytes() > b.tobytes()
    if flipped:
        a, b = b, a
    m, n = target.spec.rows, target.spec.cols
    out = []
    for metric in metrics:
        r = _similarity_matrix(a, b, metric, inv_var, center_cosine).reshape(m, n, m, n)
        if flipped:
            r = r.transpose(2, 3, 0, 1)
        out.append(np.ascontiguousarray(r))
    return out


def build_view(target: PatchGrid, query: PatchGrid, metric: MetricKind, inv_var=None,
               center_cosine: bool = True) -> ViewTensor:
    """``R(i, j, k, l)`` = similarity of target cell (i, j) and query cell (k, l)."""
    return ViewTensor(metric, _views(target, query, (metric,), inv_var, center_cosine)[0])


def build_multiview(target: PatchGrid, query: PatchGrid, metrics=DEFAULT_METRICS, inv_var=None,
                    center_cosine: bool = True, target_id: str = "", query_id: str = "") -> MatchTensor:
    metrics = tuple(MetricKind.parse(m) if isinstance(m, str) else m for m in metrics)
    if not metrics:
        raise ConfigError("at least one metric is required")
    if len(set(metrics)) != len(metrics):
        raise ConfigError(f"duplicate metrics in {[m.value for m in metrics]}")
    views = _views(target, query, metrics, inv_var, center_cosine)
    return MatchTensor(np.stack(views, axis=-1), metrics, target_id, query_id, target.spec)


# b"IIMT", u32 header length, JSON header, NDT1 tensor blob
_MT_MAGIC = b"IIMT"


def match_tensor_to_bytes(t: MatchTensor) -> bytes:
    m, n = t.grid_shape
    header = json.dumps({
        "grid": [m, n],
        "metrics": [k.value for k in t.metrics],
        "target_id": t.target_id,
        "query_id": t.query_id,
    }, sort_keys=True).encode("utf-8")
    return _MT_MAGIC + struct.pack("<I", len(header)) + header + tensor_to_bytes(t.values)


def match_tensor_from_bytes(data: bytes) -> MatchTensor:
    stream = io.BytesIO(data)
    if stream.read(4) != _MT_MAGIC:
        raise PersistenceError("not a match tensor file")
    raw = stream.read(4)
    if len(raw) != 4:
        raise PersistenceError("truncated match tensor header")
    (size,) = struct.unpack("<I", raw)
    blob = stream.read(size)
    if len(blob) != size:
        raise PersistenceError("truncated match tensor header")
    try:
        header = json.loads(blob)
    except json.JSONDecodeError as exc:
        raise PersistenceError(f"corrupt match tensor header: {exc}") from None
    values = read_tensor(stream)
    metrics = tuple(MetricKind(v) for v in header["metrics"])
    m, n = header["grid"]
    if values.shape != (m, n, m, n, len(metrics)):
        raise PersistenceError(f"tensor shape {values.shape} disagrees with header")
    return MatchTensor(values, metrics, header["target_id"], header["query_id"], GridSpec(m, n))


def save_match_tensor(path, t: MatchTensor) -> None:
    with open(path, "wb") as fh:
        fh.write(match_tensor_to_bytes(t))


def load_match_tensor(path) -> MatchTensor:
    with open(path, "rb") as fh:
        return match_tensor_from_bytes(fh.read())
