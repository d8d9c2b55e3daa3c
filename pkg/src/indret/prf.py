"""Indicative pseudo-relevance feedback.

The query contribution maps of the top-ranked targets are pooled into one
query-side weighting mask; every candidate tensor is re-weighted with it
and re-scored by the same frozen model.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .errors import ConfigError, DimensionError
from .evalkit import RetrievalRun, normalize_map
from .explain import explain_batch
from .matchtensor import MatchTensor
from .ndtensor import contract_double
from .network import Model, predict_proba

MODES = ("avg", "max")


@dataclass(frozen=True)
class PrfConfig:
    depth: int = 5
    mode: str = "avg"

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError(f"PRF depth must be >= 1, got {self.depth}")
        if self.mode not in MODES:
            raise ConfigError(f"PRF mode must be one of {MODES}, got {self.mode!r}")


@dataclass(frozen=True)
class PooledQueryMask:
    values: np.ndarray
    mode: str


def pool_raw(maps, mode: str) -> np.ndarray:
    """Elementwise mean or max of the maps, before normalisation."""
    maps = [np.asarray(getattr(m, "values", m), dtype=np.float64) for m in maps]
    if not maps:
        raise ConfigError("no query maps to pool")
    if any(m.shape != maps[0].shape for m in maps):
        raise DimensionError("query maps must share one shape")
    stack = np.stack(maps)
    if mode == "avg":
        return stack.mean(axis=0)
    if mode == "max":
        return stack.max(axis=0)
    raise ConfigError(f"PRF mode must be one of {MODES}, got {mode!r}")


def pool_queries(maps, mode: str = "avg") -> PooledQueryMask:
    return PooledQueryMask(normalize_map(pool_raw(maps, mode)), mode)


def apply_mask(t: MatchTensor, mask) -> MatchTensor:
    """Scale every view entry by the query-side weight ``mask[k, l]``."""
    w = np.asarray(getattr(mask, "values", mask), dtype=np.float64)
    m, n = t.values.shape[2:4]
    if w.shape != (m, n):
        raise DimensionError(f"mask {w.shape} does not match query grid {(m, n)}")
    return t.with_values(t.values * w[None, None, :, :, None])


def refined_target_map(m_star, mask) -> np.ndarray:
    """Target evidence under the refined query: query cells weighted by the mask.

    Same contraction as the plain decode, with the pooled mask in place of
    the all-ones query-side operand.
    """
    m = np.asarray(getattr(m_star, "values", m_star), dtype=np.float64)
    w = np.asarray(getattr(mask, "values", mask), dtype=np.float64)
    if m.ndim != 4 or w.shape != m.shape[2:]:
        raise DimensionError(f"mask {w.shape} does not match CAM query modes {m.shape[2:]}")
    return contract_double(m, w, (2, 3), (0, 1))


def rerank(model: Model, initial: RetrievalRun, cfg: PrfConfig,
           tensors: Mapping[str, MatchTensor] | Callable[[str], MatchTensor],
           batch_size: int = 32) -> tuple[RetrievalRun, PooledQueryMask]:
    """Re-score every candidate of ``initial`` under the pooled query mask.

    Missing ``Q`` maps for the top ``cfg.depth`` entries are decoded on the
    fly. Ties are broken by the initial rank.
    """
    if cfg.depth > len(initial):
        raise ConfigError(f"PRF depth {cfg.depth} exceeds run length {len(initial)}")
    get = tensors if callable(tensors) else tensors.__getitem__
    top = initial.ranked_ids[:cfg.depth]
    missing = [t for t in top if t not in initial.maps]
    if missing:
        for tid, ex in zip(missing, explain_batch(model, [get(t) for t in missing])):
            initial.maps[tid] = (ex.P.values, ex.Q.values)
    mask = pool_queries([initial.maps[t][1] for t in top], cfg.mode)
    ids = initial.ranked_ids
    scores = np.empty(len(ids))
    for start in range(0, len(ids), batch_size):
        chunk = ids[start:start + batch_size]
        scores[start:start + len(chunk)] = predict_proba(
            model, [apply_mask(get(t), mask) for t in chunk], batch_size)
    run = RetrievalRun.from_scores(initial.query_id, ids, scores)
    return run, mask
