"""End-to-end retrieval pipeline over a manifest: tensors, training, ranking,
evidence decoding, PRF and evaluation."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .datakit import DatasetManifest
from .errors import ConfigError, LookupFailure
from .evalkit import (
    IOU_THRESHOLDS,
    IouCurve,
    RetrievalRun,
    best_threshold_iou,
    miou,
    normalize_map,
    retrieval_metrics,
)
from .explain import explain_batch
from .matchtensor import DEFAULT_METRICS, MatchTensor, MetricKind, build_multiview
from .network import IRRELEVANT, RELEVANT, Model, ModelConfig, TrainConfig, predict_proba, train
from .patching import decompose, load_image
from .prf import PrfConfig, apply_mask, refined_target_map, rerank

logger = logging.getLogger(__name__)


class Corpus:
    """Patch grids of every manifest image, decomposed once and cached."""

    def __init__(self, manifest: DatasetManifest, metrics=DEFAULT_METRICS, side: int | None = None,
                 gray: bool = False, threads: int = 1):
        self.manifest = manifest
        self.metrics = tuple(MetricKind.parse(m) if isinstance(m, str) else m for m in metrics)
        self.side = side or manifest.resolution
        self.gray = gray
        self.threads = max(1, int(threads))
        self._grids: dict = {}

    @property
    def spec(self):
        return self.manifest.grid

    @property
    def channels(self) -> int:
        return len(self.metrics)

    def grid(self, image_id: str):
        g = self._grids.get(image_id)
        if g is None:
            try:
                path = self.manifest.images[image_id]
            except KeyError:
                raise LookupFailure(f"unknown image id {image_id!r}") from None
            g = decompose(load_image(path), self.spec, self.side, self.gray)
            self._grids[image_id] = g
        return g

    def query_image(self, query_id: str) -> str:
        return self.manifest.query(query_id).image

    def tensor(self, target_id: str, query_id: str) -> MatchTensor:
        return build_multiview(self.grid(target_id), self.grid(self.query_image(query_id)), self.metrics,
                               target_id=target_id, query_id=query_id)

    def tensors(self, pairs) -> list[MatchTensor]:
        """Build tensors for ``(target_id, query_id)`` pairs, in order."""
        pairs = list(pairs)
        if self.threads == 1 or len(pairs) < 2:
            return [self.tensor(t, q) for t, q in pairs]
        for img in {i for t, q in pairs for i in (t, self.query_image(q))}:
            self.grid(img)
        with ThreadPoolExecutor(self.threads) as pool:
            return list(pool.map(lambda p: self.tensor(*p), pairs))

    def model_config(self, **overrides) -> ModelConfig:
        return ModelConfig(grid_rows=self.spec.rows, grid_cols=self.spec.cols,
                           in_channels=self.channels, **overrides)


@dataclass(frozen=True)
class ExperimentConfig:
    train: TrainConfig = TrainConfig()
    har_enabled: bool = True
    model_seed: int = 0
    val_queries: int = 3
    batch_size: int = 32
    prf: PrfConfig | None = None
    thresholds: tuple = IOU_THRESHOLDS


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def pair_source(corpus: Corpus, query_ids, seed: int = 0):
    """Labelled pairs: every relevant target plus as many sampled negatives.

    Returns a callable ``(epoch, rng)`` that resamples negatives per epoch.
    Positive tensors are built once.
    """
    targets = corpus.manifest.targets
    positives, negatives_pool = [], {}
    for q in query_ids:
        rel = set(corpus.manifest.query(q).relevant)
        positives.extend((t, q) for t in corpus.manifest.query(q).relevant)
        negatives_pool[q] = [t for t in targets if t not in rel]
    pos_tensors = [(x.values, RELEVANT) for x in corpus.tensors(positives)]

    def sample(epoch, rng):
        neg = []
        for q in query_ids:
            n = len(corpus.manifest.query(q).relevant)
            pool = negatives_pool[q]
            pick = rng.choice(len(pool), size=min(n, len(pool)), replace=False)
            neg.extend((pool[i], q) for i in sorted(pick))
        return pos_tensors + [(x.values, IRRELEVANT) for x in corpus.tensors(neg)]

    return sample


def fixed_pairs(corpus: Corpus, query_ids, seed: int) -> list:
    rng = np.random.default_rng(seed)
    return pair_source(corpus, query_ids)(0, rng)


def train_model(corpus: Corpus, query_ids, cfg: ExperimentConfig = ExperimentConfig()):
    """Train on ``query_ids``; the last ``cfg.val_queries`` guide checkpoint selection."""
    ids = list(query_ids)
    if len(ids) < 1:
        raise ConfigError("no training queries")
    n_val = min(cfg.val_queries, len(ids) - 1)
    fit_ids, val_ids = (ids[:-n_val], ids[-n_val:]) if n_val > 0 else (ids, [])
    model = Model.init(corpus.model_config(har_enabled=cfg.har_enabled, seed=cfg.model_seed))
    val = fixed_pairs(corpus, val_ids, cfg.train.seed + 1) if val_ids else None
    logger.info("training on %d queries, validating on %d", len(fit_ids), len(val_ids))
    return train(model, pair_source(corpus, fit_ids), cfg.train, val)


# ---------------------------------------------------------------------------
# Ranking, evidence, PRF
# ---------------------------------------------------------------------------


def rank_query(model: Model, corpus: Corpus, query_id: str, batch_size: int = 32) -> RetrievalRun:
    targets = corpus.manifest.targets
    scores = np.empty(len(targets))
    for start in range(0, len(targets), batch_size):
        chunk = targets[start:start + batch_size]
        ts = corpus.tensors((t, query_id) for t in chunk)
        scores[start:start + len(chunk)] = predict_proba(model, ts, batch_size)
    return RetrievalRun.from_scores(query_id, targets, scores)


def rank_queries(model: Model, corpus: Corpus, query_ids, batch_size: int = 32) -> list[RetrievalRun]:
    runs = []
    for q in query_ids:
        runs.append(rank_query(model, corpus, q, batch_size))
        logger.info("ranked %s", q)
    return runs


def explain_pairs(model: Model, corpus: Corpus, pairs, mask=None, batch_size: int = 16):
    """Decoded ``(P, Q)`` per ``(target_id, query_id)``; optional query-side mask."""
    pairs = list(pairs)
    out = {}
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start:start + batch_size]
        ts = corpus.tensors(chunk)
        if mask is not None:
            ts = [apply_mask(t, mask) for t in ts]
        for p, ex in zip(chunk, explain_batch(model, ts)):
            out[p] = (ex.P.values, ex.Q.values)
    return out


def explain_top(model: Model, corpus: Corpus, run: RetrievalRun, depth: int) -> RetrievalRun:
    top = [t for t in run.ranked_ids[:depth] if t not in run.maps]
    for (t, _), maps in explain_pairs(model, corpus, [(t, run.query_id) for t in top]).items():
        run.maps[t] = maps
    return run


def prf_rerank(model: Model, corpus: Corpus, runs, cfg: PrfConfig, batch_size: int = 32):
    """PRF re-ranking of each run; returns the new runs and the pooled masks."""
    out, masks = [], {}
    for run in runs:
        explain_top(model, corpus, run, cfg.depth)
        new, mask = rerank(model, run, cfg, lambda t, q=run.query_id: corpus.tensor(t, q), batch_size)
        out.append(new)
        masks[run.query_id] = mask
    return out, masks


def localization_curves(model: Model, corpus: Corpus, query_ids, annotations, masks=None,
                        thresholds=IOU_THRESHOLDS, batch_size: int = 16) -> list[IouCurve]:
    """IoU curves of the decoded target map P against the target RoI.

    Evaluated on every (query, relevant target) pair with an annotation.
    With ``masks`` (PRF), P is decoded with the query's pooled mask as the
    query-side weight.
    """
    curves = []
    for q in query_ids:
        pairs = [(t, q) for t in corpus.manifest.query(q).relevant if t in annotations]
        mask = masks.get(q) if masks else None
        for start in range(0, len(pairs), batch_size):
            chunk = pairs[start:start + batch_size]
            for (t, _), ex in zip(chunk, explain_batch(model, corpus.tensors(chunk))):
                p = ex.P.values if mask is None else refined_target_map(ex.aggregated, mask)
                curves.append(miou(normalize_map(p), annotations[t], thresholds))
    return curves


def uniform_baseline_iou(annotations, target_ids, rows: int, cols: int) -> float:
    """IoU of a constant map: any threshold below 1 selects every cell."""
    from .evalkit import rasterize_roi

    fractions = [rasterize_roi(annotations[t], rows, cols).mean() for t in target_ids]
    return float(np.mean(fractions))


def localization_summary(curves) -> dict:
    if not curves:
        return {}
    t, best = best_threshold_iou(curves)
    return {"mIoU": math.fsum(c.miou for c in curves) / len(curves), "best_threshold": t, "IoU@best": best,
            "iou_curve": [float(v) for v in np.mean([c.ious for c in curves], axis=0)]}


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------


@dataclass
class ExperimentResult:
    model: Model
    log: object
    runs: list
    metrics: dict
    curves: list = field(default_factory=list)
    prf_runs: list | None = None


def evaluate_model(model: Model, corpus: Corpus, test_ids, annotations=None,
                   cfg: ExperimentConfig = ExperimentConfig()):
    """Rank, optionally PRF re-rank, and localise; returns (runs, prf_runs, metrics, curves)."""
    rel = corpus.manifest.relevant_sets()
    runs = rank_queries(model, corpus, test_ids, cfg.batch_size)
    metrics = retrieval_metrics(runs, rel)
    curves, prf_runs, masks = [], None, None
    if cfg.prf is not None:
        prf_runs, masks = prf_rerank(model, corpus, [_copy_run(r) for r in runs], cfg.prf, cfg.batch_size)
        metrics.update({f"prf.{k}": v for k, v in retrieval_metrics(prf_runs, rel).items()})
    if annotations:
        curves = localization_curves(model, corpus, test_ids, annotations, None, cfg.thresholds)
        metrics.update(_scalar(localization_summary(curves)))
        if masks:
            pc = localization_curves(model, corpus, test_ids, annotations, masks, cfg.thresholds)
            metrics.update({f"prf.{k}": v for k, v in _scalar(localization_summary(pc)).items()})
    return runs, prf_runs, metrics, curves


def _scalar(d: dict) -> dict:
    return {k: v for k, v in d.items() if isinstance(v, (int, float))}


def _copy_run(run: RetrievalRun) -> RetrievalRun:
    return RetrievalRun(run.query_id, list(run.entries), dict(run.maps))


def run_experiment(corpus: Corpus, train_ids, test_ids, annotations=None,
                   cfg: ExperimentConfig = ExperimentConfig()) -> ExperimentResult:
    model, log = train_model(corpus, train_ids, cfg)
    runs, prf_runs, metrics, curves = evaluate_model(model, corpus, test_ids, annotations, cfg)
    return ExperimentResult(model, log, runs, metrics, curves, prf_runs)


def holdout_split(query_ids, test_count: int, seed: int) -> tuple[list, list]:
    ids = list(query_ids)
    if not 0 < test_count < len(ids):
        raise ConfigError(f"cannot hold out {test_count} of {len(ids)} queries")
    perm = np.random.default_rng(seed).permutation(len(ids))
    test = sorted(ids[i] for i in perm[:test_count])
    return [q for q in ids if q not in set(test)], test


def with_har(cfg: ExperimentConfig, enabled: bool) -> ExperimentConfig:
    return replace(cfg, har_enabled=enabled)
