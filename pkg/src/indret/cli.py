"""Command-line interface: ``indret <subcommand> [options]``.

Results go to files under ``--out``; stdout carries one JSON summary per
invocation and progress goes to stderr. Failures print a single line
``error: <category>: <message>`` and exit with status 1; usage errors exit 2.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import datakit, evalkit, explain, gradcheck, pipeline, plotting
from .errors import ConfigError, IndretError, LookupFailure, PersistenceError, ValidationError
from .matchtensor import build_multiview, parse_metrics, save_match_tensor
from .network import TrainConfig
from .patching import GridSpec, load_image
from .prf import PrfConfig

logger = logging.getLogger("indret")

COMMANDS = ("synth", "tensor", "train", "rank", "explain", "prf", "eval", "gradcheck", "kfold")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, help="JSON file of option defaults; flags win")
    p.add_argument("--seed", type=int, default=0, help="random seed (default: 0)")
    p.add_argument("--threads", type=int, default=1, help="worker threads for per-pair work (1 = reference mode)")
    p.add_argument("--out", type=Path, default=Path("out"), help="output directory (default: ./out)")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more progress output on stderr")
    return p


def _dataset_args(p, need_model=False):
    p.add_argument("--manifest", type=Path, required=True, help="dataset manifest.json")
    p.add_argument("--metrics", default="cosine,euclidean,manhattan",
                   help="comma-separated metric views (default: cosine,euclidean,manhattan)")
    p.add_argument("--grid", help="override the manifest grid, e.g. 7x7")
    p.add_argument("--side", type=int, help="override the resize side in pixels")
    p.add_argument("--gray", action="store_true", help="decompose grayscale images")
    if need_model:
        p.add_argument("--model", type=Path, required=True, help="checkpoint written by 'train'")


def _query_selection(p):
    g = p.add_mutually_exclusive_group()
    g.add_argument("--queries", help="comma-separated query ids (default: all, or the test split)")
    g.add_argument("--split", type=Path, help="split.json written by 'train'; its test queries are used")


def _prf_args(p, default_depth=5):
    p.add_argument("--prf-depth", type=int, default=default_depth, help="assumed-relevant top results")
    p.add_argument("--prf-mode", choices=("avg", "max"), default="avg", help="pooling of query maps")


def _train_args(p):
    p.add_argument("--epochs", type=int, default=15)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=0.0)
    p.add_argument("--no-har", action="store_true", help="disable hypersphere attention regulation")
    p.add_argument("--val-queries", type=int, default=3, help="training queries reserved for checkpoint selection")


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="indret", description="Indicative image retrieval toolkit.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("synth", parents=[common], help="generate a planted-motif dataset")
    p.add_argument("--corpus-size", type=int, default=200)
    p.add_argument("--queries", type=int, default=20)
    p.add_argument("--grid", default="7x7")
    p.add_argument("--side", type=int, default=112)
    p.add_argument("--motif-cells", type=int, default=2)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--distractor-fraction", type=float, default=0.5)
    p.add_argument("--jitter", type=int, default=0, help="motif translation in pixels")
    p.add_argument("--background-distractors", action="store_true",
                   help="distractors copy a background block of a query")
    p.set_defaults(seed=42)

    p = sub.add_parser("tensor", parents=[common], help="build and dump the match tensor of a pair")
    _dataset_args(p)
    p.add_argument("--target", required=True, help="target image id")
    p.add_argument("--query", required=True, help="query id or image id")

    p = sub.add_parser("train", parents=[common], help="train a model on a query split")
    _dataset_args(p)
    _train_args(p)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--test-count", type=int, default=4, help="queries held out for testing")
    g.add_argument("--train-queries", help="comma-separated training query ids (rest are test)")

    p = sub.add_parser("rank", parents=[common], help="rank every target for each query")
    _dataset_args(p, need_model=True)
    _query_selection(p)

    p = sub.add_parser("explain", parents=[common], help="decode P/Q evidence for one pair")
    _dataset_args(p, need_model=True)
    p.add_argument("--target", required=True, help="target image id")
    p.add_argument("--query", required=True, help="query id")
    p.add_argument("--upsample", choices=("nearest", "bilinear"), default="nearest")
    p.add_argument("--keep-layer-scale", action="store_true",
                   help="average raw per-layer CAMs instead of max-normalised ones")

    p = sub.add_parser("prf", parents=[common], help="pseudo-relevance feedback re-ranking of a run")
    _dataset_args(p, need_model=True)
    p.add_argument("--run", type=Path, required=True, help="initial run file")
    _prf_args(p)

    p = sub.add_parser("eval", parents=[common], help="metric report for a run file")
    p.add_argument("--run", type=Path, required=True, help="run file")
    p.add_argument("--manifest", type=Path, required=True, help="manifest with relevance sets")
    p.add_argument("--annotations", type=Path, help="RoI annotations; with --model adds localisation")
    p.add_argument("--model", type=Path, help="checkpoint used to decode evidence for mIoU")
    p.add_argument("--metrics", default="cosine,euclidean,manhattan")
    p.add_argument("--grid")
    p.add_argument("--side", type=int)
    p.add_argument("--gray", action="store_true")
    p.add_argument("--ks", default="5,10,20", help="cut-offs for mAP@k")
    p.add_argument("--label", default="run", help="label used in figures")

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p.add_argument("--configurations", type=int, default=100)
    p.add_argument("--h", type=float, default=1e-4, help="central-difference step")
    p.add_argument("--tolerance", type=float, default=1e-4)

    p = sub.add_parser("kfold", parents=[common], help="k-fold train/evaluate over queries")
    _dataset_args(p)
    _train_args(p)
    p.add_argument("--folds", type=int, default=10)
    p.add_argument("--annotations", type=Path, help="RoI annotations for mIoU")
    p.add_argument("--prf", action="store_true", help="also evaluate PRF re-ranking")
    _prf_args(p)
    return parser


def _subparsers(parser):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices
    return {}


def _apply_config(parser, argv, args):
    """Re-parse with config-file values as defaults so explicit flags win."""
    try:
        doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {args.config}: {exc}") from None
    if not isinstance(doc, dict):
        raise UsageError("config file must hold a JSON object")
    subs = _subparsers(parser)
    sp = subs[args.command]
    known = {a.dest for a in sp._actions}
    everywhere = {a.dest for s in subs.values() for a in s._actions}
    values = {}
    for key, val in doc.items():
        if key in subs:
            if not isinstance(val, dict):
                raise UsageError(f"config section {key!r} must be an object")
            if key == args.command:
                for k, v in val.items():
                    k = k.replace("-", "_")
                    if k not in known:
                        raise UsageError(f"unknown option {k!r} in config section {key!r}")
                    values[k] = v
            continue
        k = key.replace("-", "_")
        if k not in everywhere:
            raise UsageError(f"unknown config option {key!r}")
        if k in known:
            values.setdefault(k, val)
    for k in ("config", "command", "help"):
        values.pop(k, None)
    for k, v in values.items():
        action = next(a for a in sp._actions if a.dest == k)
        if action.type is Path and v is not None:
            values[k] = Path(v)
    sp.set_defaults(**values)
    return parser.parse_args(argv)


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config is not None:
        try:
            args = _apply_config(parser, argv, args)
        except UsageError as exc:
            parser.error(str(exc))
    problems = _validate(args)
    if problems:
        parser.error("; ".join(problems))
    return args


def _validate(args) -> list:
    out = []
    if args.threads < 1:
        out.append("--threads must be >= 1")
    if getattr(args, "prf_depth", 1) < 1:
        out.append("--prf-depth must be >= 1")
    if getattr(args, "epochs", 1) < 1:
        out.append("--epochs must be >= 1")
    if args.command == "eval" and args.model is not None and args.annotations is None:
        out.append("--model requires --annotations")
    if args.command == "kfold" and not args.prf and args.prf_depth != 5:
        out.append("--prf-depth requires --prf")
    return out


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def _emit(summary: dict) -> None:
    sys.stdout.write(json.dumps(summary, sort_keys=True, ensure_ascii=False) + "\n")
    sys.stdout.flush()


def _manifest(args) -> datakit.DatasetManifest:
    m = datakit.load_manifest(args.manifest)
    if getattr(args, "grid", None):
        m = replace(m, grid=GridSpec.parse(args.grid))
    return m


def _corpus(args, manifest=None) -> pipeline.Corpus:
    manifest = manifest or _manifest(args)
    return pipeline.Corpus(manifest, parse_metrics(args.metrics), args.side, args.gray, args.threads)


def _model(args, corpus: pipeline.Corpus):
    model = datakit.load_checkpoint(args.model)
    expect = corpus.model_config(channels=model.config.channels, strides=model.config.strides,
                                 kernel=model.config.kernel, har_enabled=model.config.har_enabled,
                                 seed=model.config.seed)
    if model.config != expect:
        raise PersistenceError(
            f"checkpoint expects grid {model.config.grid_rows}x{model.config.grid_cols} with "
            f"{model.config.in_channels} views; dataset gives {expect.grid_rows}x{expect.grid_cols} "
            f"with {expect.in_channels}")
    return model


def _ids(text) -> list:
    return [t.strip() for t in text.split(",") if t.strip()]


def _selected_queries(args, manifest) -> list:
    if getattr(args, "queries", None):
        ids = _ids(args.queries)
    elif getattr(args, "split", None):
        ids = json.loads(Path(args.split).read_text(encoding="utf-8"))["test"]
    else:
        return manifest.query_ids
    unknown = [q for q in ids if q not in set(manifest.query_ids)]
    if unknown:
        raise ValidationError("unknown query ids", unknown)
    return ids


def _train_config(args) -> TrainConfig:
    return TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, momentum=args.momentum,
                       weight_decay=args.weight_decay, seed=args.seed)


def _experiment_config(args, prf=None) -> pipeline.ExperimentConfig:
    return pipeline.ExperimentConfig(train=_train_config(args), har_enabled=not args.no_har,
                                     model_seed=args.seed, val_queries=args.val_queries, prf=prf)


def _write_json(path: Path, doc) -> Path:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> dict:
    grid = GridSpec.parse(args.grid)
    cfg = datakit.SyntheticConfig(
        corpus_size=args.corpus_size, n_queries=args.queries, grid_rows=grid.rows, grid_cols=grid.cols,
        resolution=args.side, motif_cells=args.motif_cells, noise=args.noise,
        distractor_fraction=args.distractor_fraction, jitter=args.jitter,
        background_distractors=args.background_distractors, seed=args.seed)
    manifest, annotations = datakit.generate_synthetic(cfg, args.out)
    return {"manifest": str(args.out / "manifest.json"), "annotations": str(args.out / "annotations.json"),
            "images": len(manifest.images), "queries": len(manifest.queries),
            "relevant_per_query": cfg.relevant_per_query}


def cmd_tensor(args) -> dict:
    corpus = _corpus(args)
    qimg = args.query
    if args.query in set(corpus.manifest.query_ids):
        qimg = corpus.query_image(args.query)
    t = build_multiview(corpus.grid(args.target), corpus.grid(qimg), corpus.metrics,
                        target_id=args.target, query_id=args.query)
    path = args.out / f"tensor_{args.target}__{args.query}.iimt"
    save_match_tensor(path, t)
    return {"path": str(path), "shape": list(t.values.shape), "metrics": [m.value for m in t.metrics]}


def cmd_train(args) -> dict:
    corpus = _corpus(args)
    ids = corpus.manifest.query_ids
    if args.train_queries:
        train_ids = _ids(args.train_queries)
        unknown = [q for q in train_ids if q not in set(ids)]
        if unknown:
            raise ValidationError("unknown query ids", unknown)
        test_ids = [q for q in ids if q not in set(train_ids)]
    else:
        train_ids, test_ids = pipeline.holdout_split(ids, args.test_count, args.seed)
    model, log = pipeline.train_model(corpus, train_ids, _experiment_config(args))
    datakit.save_checkpoint(model, args.out / "model.iirm")
    _write_json(args.out / "split.json", {"train": train_ids, "test": test_ids})
    (args.out / "train_log.csv").write_text(log.to_csv(), encoding="utf-8")
    plotting.training_curves(log.records, args.out / "training_curves.png")
    last = log.records[-1]
    return {"model": str(args.out / "model.iirm"), "best_epoch": log.best_epoch, "epochs": len(log.records),
            "final_loss": round(last.loss, 6), "train_queries": len(train_ids), "test_queries": len(test_ids)}


def cmd_rank(args) -> dict:
    corpus = _corpus(args)
    model = _model(args, corpus)
    queries = _selected_queries(args, corpus.manifest)
    runs = pipeline.rank_queries(model, corpus, queries)
    path = args.out / "run.txt"
    evalkit.write_run_file(path, runs)
    return {"run": str(path), "queries": len(runs), "targets": len(corpus.manifest.targets)}


def cmd_explain(args) -> dict:
    corpus = _corpus(args)
    model = _model(args, corpus)
    if args.target not in corpus.manifest.images:
        raise LookupFailure(f"unknown target id {args.target!r}")
    qimg = corpus.query_image(args.query)
    tpx = load_image(corpus.manifest.images[args.target])
    qpx = load_image(corpus.manifest.images[qimg])
    ex = explain.explain_pair(model, corpus.tensor(args.target, args.query), (tpx.height, tpx.width),
                              (qpx.height, qpx.width), not args.keep_layer_scale, args.upsample)
    d = args.out / f"explain_{args.target}__{args.query}"
    d.mkdir(parents=True, exist_ok=True)
    explain.write_map_csv(d / "P.csv", ex.P.values)
    explain.write_map_csv(d / "Q.csv", ex.Q.values)
    explain.write_heatmap(d / "heat_target.png", ex.heat_target)
    explain.write_heatmap(d / "heat_query.png", ex.heat_query)
    plotting.evidence_overlay(tpx.pixels, qpx.pixels, ex.heat_target, ex.heat_query, d / "evidence.png",
                              ex.score.relevance)
    return {"dir": str(d), "relevance": round(ex.score.relevance, 6), "layers": len(ex.cams)}


def cmd_prf(args) -> dict:
    corpus = _corpus(args)
    model = _model(args, corpus)
    cfg = PrfConfig(args.prf_depth, args.prf_mode)
    runs = evalkit.read_run_file(args.run)
    new_runs, masks = pipeline.prf_rerank(model, corpus, runs, cfg)
    path = args.out / "run_prf.txt"
    evalkit.write_run_file(path, new_runs)
    mdir = args.out / "prf_masks"
    mdir.mkdir(exist_ok=True)
    for q, mask in masks.items():
        explain.write_map_csv(mdir / f"{q}.csv", mask.values)
    return {"run": str(path), "queries": len(new_runs), "depth": cfg.depth, "mode": cfg.mode}


def cmd_eval(args) -> dict:
    manifest = _manifest(args)
    runs = evalkit.read_run_file(args.run)
    if not runs:
        raise ValidationError(f"run file {args.run} is empty")
    rel = manifest.relevant_sets()
    unknown = [r.query_id for r in runs if r.query_id not in rel]
    if unknown:
        raise ValidationError("run queries missing from manifest", unknown)
    try:
        ks = [int(k) for k in _ids(args.ks)]
    except ValueError:
        raise ConfigError(f"bad --ks {args.ks!r}") from None
    per_query = []
    for r in runs:
        row = {"query": r.query_id, "AP": evalkit.average_precision(r, rel[r.query_id])}
        for k in ks:
            row[f"AP@{k}"] = evalkit.average_precision(r, rel[r.query_id], k)
        per_query.append(row)
    aggregate = {}
    for key in ["AP"] + [f"AP@{k}" for k in ks]:
        m, s = evalkit.mean_std(row[key] for row in per_query)
        name = "mAP" + key[2:]
        aggregate[name] = {"mean": m, "std": s, "formatted": evalkit.format_pct(m, s)}
    report = {"run": str(args.run), "queries": len(runs), "per_query": per_query, "aggregate": aggregate}
    figures = [plotting.metric_bars({k: v["mean"] for k, v in aggregate.items()}, args.out / "metrics.png")]
    if args.annotations is not None and args.model is not None:
        ann = datakit.load_annotations(args.annotations)
        corpus = _corpus(args, manifest)
        model = _model(args, corpus)
        curves = pipeline.localization_curves(model, corpus, [r.query_id for r in runs], ann)
        loc = pipeline.localization_summary(curves)
        if loc:
            targets = [t for r in runs for t in manifest.query(r.query_id).relevant if t in ann]
            loc["uniform_baseline_iou"] = pipeline.uniform_baseline_iou(
                ann, targets, manifest.grid.rows, manifest.grid.cols)
            report["localization"] = loc
            figures.append(plotting.iou_curves({args.label: (evalkit.IOU_THRESHOLDS, loc["iou_curve"])},
                                               args.out / "iou_curve.png"))
    _write_json(args.out / "report.json", report)
    summary = {k: v["formatted"] for k, v in aggregate.items()}
    if "localization" in report:
        summary["mIoU"] = f"{100.0 * report['localization']['mIoU']:.2f}"
    summary["report"] = str(args.out / "report.json")
    summary["figures"] = [str(f) for f in figures]
    return summary


def cmd_gradcheck(args) -> dict:
    report = gradcheck.run_suite(args.seed, args.configurations, args.h)
    d = report.to_dict()
    d.pop("seconds")
    _write_json(args.out / "gradcheck.json", d)
    summary = {"max_rel_error": report.max_rel_error, "configurations": report.configurations,
               "seed": args.seed, "passed": report.max_rel_error < args.tolerance}
    if not summary["passed"]:
        _emit(summary)
        raise ValidationError(
            f"max relative error {report.max_rel_error:.3e} exceeds {args.tolerance:g}")
    return summary


def cmd_kfold(args) -> dict:
    corpus = _corpus(args)
    ann = datakit.load_annotations(args.annotations) if args.annotations else None
    prf = PrfConfig(args.prf_depth, args.prf_mode) if args.prf else None
    cfg = _experiment_config(args, prf)
    curves_all = {}

    def run_fold(train_ids, test_ids, fold):
        logger.info("fold %d: %d train / %d test queries", fold, len(train_ids), len(test_ids))
        res = pipeline.run_experiment(corpus, train_ids, test_ids, ann, cfg)
        if res.curves:
            curves_all[f"fold {fold}"] = (evalkit.IOU_THRESHOLDS, np.mean([c.ious for c in res.curves], axis=0))
        return res.metrics

    report = evalkit.kfold_harness(corpus.manifest.query_ids, args.folds, args.seed, run_fold)
    _write_json(args.out / "kfold_report.json", report.to_dict())
    if curves_all:
        plotting.iou_curves(curves_all, args.out / "kfold_iou.png", "IoU per fold")
    return {k: evalkit.format_pct(m, s) for k, (m, s) in report.aggregate.items()
            if k.split(".")[-1].startswith("m")}


HANDLERS = {
    "synth": cmd_synth, "tensor": cmd_tensor, "train": cmd_train, "rank": cmd_rank,
    "explain": cmd_explain, "prf": cmd_prf, "eval": cmd_eval, "gradcheck": cmd_gradcheck,
    "kfold": cmd_kfold,
}


def main(argv=None) -> int:
    args = parse_args(sys.argv[1:] if argv is None else list(argv))
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.out.mkdir(parents=True, exist_ok=True)
        start = time.perf_counter()
        summary = HANDLERS[args.command](args)
        logger.info("%s finished in %.1f s", args.command, time.perf_counter() - start)
    except IndretError as exc:
        print(f"error: {exc.category}: {_one_line(exc)}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: io: {_one_line(exc)}", file=sys.stderr)
        return 1
    _emit(summary)
    return 0


def _one_line(exc) -> str:
    text = str(exc.args[0]) if isinstance(exc, KeyError) and exc.args else str(exc)
    return " ".join(text.split())


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
