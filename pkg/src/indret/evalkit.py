"""Retrieval and localisation metrics, run files and the k-fold harness."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, ContractError, PersistenceError, ValidationError

IOU_THRESHOLDS = tuple(round(0.1 * i, 1) for i in range(10))


@dataclass
class RetrievalRun:
    """Ranked targets for one query, best first.

    ``maps`` optionally holds decoded ``(P, Q)`` contribution matrices per
    target id.
    """

    query_id: str
    entries: list
    maps: dict = field(default_factory=dict)

    def __post_init__(self):
        self.entries = [(str(t), float(s)) for t, s in self.entries]
        ids = [t for t, _ in self.entries]
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate target ids in run", sorted({t for t in ids if ids.count(t) > 1}))
        scores = [s for _, s in self.entries]
        if any(b > a for a, b in zip(scores, scores[1:])):
            raise ValidationError(f"scores of run {self.query_id} are not non-increasing")

    @classmethod
    def from_scores(cls, query_id: str, target_ids: Sequence[str], scores, prior_rank=None) -> "RetrievalRun":
        """Sort by descending score; ties keep ``prior_rank`` (default: input) order."""
        scores = [float(s) for s in scores]
        prior = list(range(len(target_ids))) if prior_rank is None else list(prior_rank)
        order = sorted(range(len(target_ids)), key=lambda i: (-scores[i], prior[i]))
        return cls(query_id, [(target_ids[i], scores[i]) for i in order])

    @property
    def ranked_ids(self) -> list[str]:
        return [t for t, _ in self.entries]

    def __len__(self):
        return len(self.entries)


@dataclass(frozen=True)
class RoiAnnotation:
    """Axis-aligned boxes ``(x0, y0, x1, y1)`` in normalised image coordinates."""

    image_id: str
    boxes: tuple = ()

    def __post_init__(self):
        boxes = tuple(tuple(float(v) for v in b) for b in self.boxes)
        for b in boxes:
            if len(b) != 4:
                raise ValidationError(f"box of {self.image_id} needs 4 coordinates")
            x0, y0, x1, y1 = b
            if not (0.0 <= x0 <= x1 <= 1.0 and 0.0 <= y0 <= y1 <= 1.0):
                raise ValidationError(f"box {b} of {self.image_id} is out of bounds")
        object.__setattr__(self, "boxes", boxes)


@dataclass(frozen=True)
class IouCurve:
    thresholds: tuple
    ious: tuple

    @property
    def miou(self) -> float:
        return math.fsum(self.ious) / len(self.ious)


# ---------------------------------------------------------------------------
# Ranking metrics
# ---------------------------------------------------------------------------


def _ranked(run) -> list:
    return run.ranked_ids if isinstance(run, RetrievalRun) else list(run)


def average_precision(run, relevant, k: float | None = None) -> float:
    """Mean precision at the ranks of relevant items.

    With ``k`` the list is truncated and the denominator becomes
    ``min(|relevant|, k)``.
    """
    relevant = set(relevant)
    if not relevant:
        raise ConfigError("relevant set is empty")
    ranked = _ranked(run)
    limit = len(ranked) if k is None or math.isinf(k) else int(k)
    if limit < 1:
        raise ConfigError("k must be >= 1")
    hits, total = 0, 0.0
    for r, tid in enumerate(ranked[:limit], start=1):
        if tid in relevant:
            hits += 1
            total += hits / r
    denom = len(relevant) if k is None or math.isinf(k) else min(len(relevant), limit)
    return total / denom


def map_at_k(runs: Sequence[RetrievalRun], relevant_sets, k: float | None = None) -> float:
    """Mean of per-query AP on lists truncated at ``k`` (``None``/inf: no cut)."""
    if k is not None and not math.isinf(k) and k < 1:
        raise ConfigError("k must be >= 1")
    if not runs:
        raise ConfigError("no runs to evaluate")
    aps = []
    for i, run in enumerate(runs):
        rel = relevant_sets[run.query_id] if isinstance(relevant_sets, Mapping) else relevant_sets[i]
        aps.append(average_precision(run, rel, k))
    # correctly rounded sum: the result does not depend on query order
    return math.fsum(aps) / len(aps)


def mean_average_precision(runs, relevant_sets) -> float:
    return map_at_k(runs, relevant_sets, None)


# ---------------------------------------------------------------------------
# Localisation metrics
# ---------------------------------------------------------------------------


def rasterize_roi(roi: RoiAnnotation, rows: int, cols: int, coverage: float = 0.5) -> np.ndarray:
    """Boolean grid; a cell is in the RoI when one box covers >= ``coverage`` of it."""
    out = np.zeros((rows, cols), dtype=bool)
    ys = np.arange(rows + 1) / rows
    xs = np.arange(cols + 1) / cols
    for x0, y0, x1, y1 in roi.boxes:
        oy = np.clip(np.minimum(ys[1:], y1) - np.maximum(ys[:-1], y0), 0, None) * rows
        ox = np.clip(np.minimum(xs[1:], x1) - np.maximum(xs[:-1], x0), 0, None) * cols
        out |= np.outer(oy, ox) >= coverage - 1e-9
    return out


def _as_map(p) -> np.ndarray:
    return np.asarray(getattr(p, "values", p), dtype=np.float64)


def binary_iou(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def iou(p, roi: RoiAnnotation, threshold: float) -> float:
    """IoU between ``{cells with P > t}`` and the rasterised RoI."""
    p = _as_map(p)
    if p.ndim != 2:
        raise ContractError(f"contribution map must be 2-D, got {p.shape}")
    if p.size and (p.min() < -1e-12 or p.max() > 1.0 + 1e-9):
        raise ContractError("contribution map must be max-normalised to [0, 1]")
    if not 0.0 <= threshold < 1.0:
        raise ContractError(f"threshold must lie in [0, 1), got {threshold}")
    mask = p > threshold
    return binary_iou(mask, rasterize_roi(roi, *p.shape))


def miou(p, roi: RoiAnnotation, thresholds=IOU_THRESHOLDS) -> IouCurve:
    return IouCurve(tuple(thresholds), tuple(iou(p, roi, t) for t in thresholds))


def normalize_map(p) -> np.ndarray:
    """Scale a non-negative map so its maximum is 1 (all-zero stays zero)."""
    p = _as_map(p)
    m = p.max() if p.size else 0.0
    return p / m if m > 0 else np.zeros_like(p)


# ---------------------------------------------------------------------------
# Aggregation and k-fold harness
# ---------------------------------------------------------------------------


def mean_std(values) -> tuple[float, float]:
    v = [float(x) for x in values]
    m = math.fsum(v) / len(v)
    return m, math.sqrt(math.fsum((x - m) ** 2 for x in v) / len(v))


def format_pct(mean: float, std: float) -> str:
    return f"{100.0 * mean:.2f}±{100.0 * std:.2f}"


def kfold_splits(query_ids: Sequence[str], k: int, seed: int) -> list[tuple[list, list]]:
    """Partition queries into ``k`` folds; returns ``(train, test)`` per fold."""
    if k < 2:
        raise ConfigError("k-fold needs k >= 2")
    ids = list(query_ids)
    if len(ids) < k:
        raise ConfigError(f"{len(ids)} queries cannot fill {k} folds")
    perm = np.random.default_rng(seed).permutation(len(ids))
    folds = [sorted(ids[i] for i in chunk) for chunk in np.array_split(perm, k)]
    out = []
    for f, test in enumerate(folds):
        test_set = set(test)
        out.append(([q for q in ids if q not in test_set], test))
    return out


@dataclass
class KFoldReport:
    per_fold: list
    aggregate: dict

    def to_dict(self) -> dict:
        return {
            "per_fold": self.per_fold,
            "aggregate": {
                k: {"mean": m, "std": s, "formatted": format_pct(m, s)}
                for k, (m, s) in self.aggregate.items()
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def aggregate_folds(per_fold: Sequence[dict]) -> dict:
    keys = sorted({k for f in per_fold for k, v in f.items() if isinstance(v, (int, float)) and k != "fold"})
    return {k: mean_std(f[k] for f in per_fold if k in f) for k in keys}


def kfold_harness(query_ids: Sequence[str], k: int, seed: int,
                  run_fold: Callable[[list, list, int], dict]) -> KFoldReport:
    """Train on k-1 folds, evaluate on the held-out one, report mean and std.

    ``run_fold(train_ids, test_ids, fold)`` returns a dict of metric values.
    """
    per_fold = []
    for f, (train_ids, test_ids) in enumerate(kfold_splits(query_ids, k, seed)):
        metrics = dict(run_fold(train_ids, test_ids, f))
        metrics["fold"] = f
        per_fold.append(metrics)
    return KFoldReport(per_fold, aggregate_folds(per_fold))


def retrieval_metrics(runs, relevant_sets, ks=(5, 10, 20)) -> dict:
    out = {"mAP": map_at_k(runs, relevant_sets, None)}
    for k in ks:
        out[f"mAP@{k}"] = map_at_k(runs, relevant_sets, k)
    return out


def best_threshold_iou(curves: Iterable[IouCurve]) -> tuple[float, float]:
    """(threshold, mean IoU) maximising the mean IoU across curves."""
    curves = list(curves)
    if not curves:
        raise ConfigError("no IoU curves")
    means = np.mean([c.ious for c in curves], axis=0)
    i = int(np.argmax(means))
    return curves[0].thresholds[i], float(means[i])


# ---------------------------------------------------------------------------
# Run files: "query_id target_id rank score"
# ---------------------------------------------------------------------------


def format_run_lines(runs: Iterable[RetrievalRun]) -> str:
    lines = []
    for run in runs:
        for rank, (tid, score) in enumerate(run.entries, start=1):
            lines.append(f"{run.query_id} {tid} {rank} {score:.6f}")
    return "\n".join(lines) + ("\n" if lines else "")


def write_run_file(path, runs: Iterable[RetrievalRun]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_run_lines(runs))


def read_run_file(path) -> list[RetrievalRun]:
    rows: dict[str, list] = {}
    try:
        with open(path, encoding="utf-8") as fh:
            for n, line in enumerate(fh, start=1):
                if not line.strip() or line.startswith("#"):
                    continue
                parts = line.split()
                if len(parts) != 4:
                    raise PersistenceError(f"{path}:{n}: expected 4 fields")
                q, t, rank, score = parts
                rows.setdefault(q, []).append((int(rank), t, float(score)))
    except ValueError as exc:
        raise PersistenceError(f"{path}: {exc}") from None
    runs = []
    for q, items in rows.items():
        items.sort()
        runs.append(RetrievalRun(q, [(t, s) for _, t, s in items]))
    return runs
