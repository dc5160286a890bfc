"""Command-line entry point: ``ecstfl <command> [flags]``.

Every command writes into its own run directory ``<out>/<timestamp>-<command>``
(or ``<out>/<run-name>``) together with a ``manifest.json`` that records the
resolved configuration, package versions and SHA-256 digests of all inputs
and outputs. Exit codes: 0 success, 1 validation or usage error, 2 numerical
failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import platform
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from . import io as fio
from .annotation import (
    DEFAULT_THRESHOLD,
    AnnotationError,
    DegenerateAgreementError,
    kappa_report,
    single_labeled_subset,
)
from .data import DEFAULT_PROPORTIONS, DataError, DatasetSpec, class_counts, kfold_split, prepare, synth_generate
from .evaluation import EvaluationError, confusion, cv_aggregate, metrics, project_2d
from .losses import CollapsedFeaturesError
from .model import LOSS_MODES, TrainConfig, TrainingDivergedError, forward, lr_grid_search, train

log = logging.getLogger("ecstfl")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2

LAMBDA_GRID = (1, 3, 5, 10, 15, 20, 30, 50, 80, 100)
BATCH_GRID = (18, 24, 30, 36, 42, 48)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _floats(text):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _global_flags(parser, suppress):
    default = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--seed", type=int, default=default(0), help="master seed")
    parser.add_argument("--out", default=default("runs"), help="base output directory")
    parser.add_argument("--run-name", default=default(None), help="run directory name (default <timestamp>-<command>)")
    parser.add_argument("--jobs", type=int, default=default(os.cpu_count() or 1), help="worker processes for folds and sweep cells")
    parser.add_argument("--config", default=default(None), help="JSON file of flag values; explicit flags win")
    parser.add_argument("-v", "--verbose", action="store_true", default=default(False))


def _train_flags(p):
    p.add_argument("--data", required=True, help="dataset directory written by gen-data")
    p.add_argument("--folds", help="fold CSV (default <data>/folds.csv)")
    p.add_argument("--loss", dest="loss_mode", choices=LOSS_MODES, default="softmax+ecstfl")
    p.add_argument("--lambda", dest="lam", type=float, default=10.0)
    p.add_argument("--batch-size", type=int, default=24)
    p.add_argument("--lr", dest="learning_rate", type=float, default=TrainConfig.learning_rate)
    p.add_argument("--lr-grid", type=_floats, help="pick the learning rate by grid search over these values")
    p.add_argument("--epochs", type=int, default=TrainConfig.epochs)
    p.add_argument("--patience", dest="patience_epochs", type=int, default=3)
    p.add_argument("--min-improvement", type=float, default=1e-4)
    p.add_argument("--center-coef", type=float, default=1e-4)
    p.add_argument("--center-rate", type=float, default=0.5)
    p.add_argument("--frame-hidden", type=int, default=TrainConfig.frame_hidden)
    p.add_argument("--hidden-dim", dest="feature_dim", type=int, default=TrainConfig.feature_dim)
    p.add_argument("--min-usable", type=float, default=0.5, help="minimum usable-frame rate")


def build_parser():
    parser = _Parser(prog="ecstfl", description=__doc__.splitlines()[0])
    _global_flags(parser, suppress=False)
    common = _Parser(add_help=False)
    _global_flags(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", parents=[common], help="generate a synthetic clip dataset and folds")
    spec = DatasetSpec()
    p.add_argument("--n", type=int, default=spec.n_clips)
    p.add_argument("--feature-dim", type=int, default=spec.feature_dim)
    p.add_argument("--separation", type=float, default=spec.cluster_separation)
    p.add_argument("--noise", type=float, default=spec.noise_scale)
    p.add_argument("--frame-noise", type=float, default=spec.frame_noise)
    p.add_argument("--length-min", type=int, default=spec.length_range[0])
    p.add_argument("--length-max", type=int, default=spec.length_range[1])
    p.add_argument("--dropout", type=float, default=spec.dropout_rate)
    p.add_argument("--proportions", type=_floats, default=list(DEFAULT_PROPORTIONS))
    p.add_argument("--k", type=int, default=5, help="number of folds")
    p.add_argument("--stratify", action="store_true", help="class-stratified folds")

    p = sub.add_parser("train", parents=[common], help="train on the training split of a fold")
    _train_flags(p)
    p.add_argument("--fold", default="1", help="fold index or 'all'")

    p = sub.add_parser("eval", parents=[common], help="evaluate checkpoints on their test folds")
    p.add_argument("--data", required=True)
    p.add_argument("--folds")
    p.add_argument("--checkpoints", nargs="+", required=True, help="checkpoint files or train run directories")
    p.add_argument("--min-usable", type=float, default=0.5)

    p = sub.add_parser("kappa", parents=[common], help="Fleiss's kappa and single-label extraction")
    p.add_argument("--annotations", required=True)
    p.add_argument("--r", type=int, default=DEFAULT_THRESHOLD, help="label when a count exceeds r")

    p = sub.add_parser("sweep", parents=[common], help="lambda or batch-size sensitivity sweep on one fold")
    _train_flags(p)
    p.add_argument("--axis", choices=("lambda", "batch"), required=True)
    p.add_argument("--grid", type=_floats)
    p.add_argument("--fold", type=int, default=1)

    p = sub.add_parser("report", parents=[common], help="summarise finished run directories")
    p.add_argument("--runs", nargs="+", required=True)
    return parser


def parse_args(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            overrides = fio.read_json(args.config)
        except (OSError, ValueError) as exc:
            parser.error(f"cannot read config {args.config}: {exc}")
        if not isinstance(overrides, dict):
            parser.error("config file must hold a JSON object")
        subparser = parser._subparsers._group_actions[0].choices[args.command]
        # keys may be spelled as flags ("lambda", "batch-size") or as destinations ("lam")
        names = {}
        for action in parser._actions + subparser._actions:
            names[action.dest] = action.dest
            for opt in action.option_strings:
                names[opt.lstrip("-").replace("-", "_")] = action.dest
        unknown = sorted(k for k in overrides if k.replace("-", "_") not in names)
        if unknown:
            parser.error(f"config {args.config}: unknown keys {', '.join(unknown)}")
        overrides = {names[k.replace("-", "_")]: v for k, v in overrides.items()}
        # file values become defaults; flags on the command line are parsed again on top.
        # Global options live on the top-level parser only, so a subcommand default
        # cannot mask a global flag given before the subcommand.
        global_dests = {a.dest for a in parser._actions}
        parser.set_defaults(**{k: v for k, v in overrides.items() if k in global_dests})
        subparser.set_defaults(**{k: v for k, v in overrides.items() if k not in global_dests})
        args = parser.parse_args(argv)
    return args


# -- run directory bookkeeping ---------------------------------------------------

class Run:
    def __init__(self, args, inputs=()):
        self.args = args
        self.start = time.perf_counter()
        name = args.run_name or f"{datetime.now(timezone.utc):%Y%m%d-%H%M%S}-{args.command}"
        base = Path(args.out)
        path = base / name
        if args.run_name is None:
            n = 2
            while path.exists():
                path = base / f"{name}-{n}"
                n += 1
        path.mkdir(parents=True, exist_ok=True)
        self.dir = path
        self.inputs = list(inputs)

    def finish(self, config: dict):
        outputs = {}
        for p in sorted(self.dir.rglob("*")):
            if p.is_file() and p.name != "manifest.json":
                outputs[p.relative_to(self.dir).as_posix()] = fio.sha256_file(p)
        manifest = {
            "command": self.args.command,
            "config": config,
            "seed": self.args.seed,
            "versions": {"ecstfl": __version__, "numpy": np.__version__, "python": platform.python_version()},
            "inputs": {str(p): fio.sha256_file(p) for p in self.inputs},
            "outputs": outputs,
            "duration_s": time.perf_counter() - self.start,
        }
        fio.write_json(self.dir / "manifest.json", manifest)
        print(self.dir)
        return manifest


def _resolved(args) -> dict:
    skip = {"config", "verbose", "out", "run_name", "jobs"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def train_config_from(args, **override) -> TrainConfig:
    names = ("learning_rate", "patience_epochs", "min_improvement", "batch_size", "lam", "epochs",
             "loss_mode", "center_coef", "center_rate", "frame_hidden", "feature_dim")
    values = {n: getattr(args, n) for n in names}
    values["seed"] = args.seed
    values.update(override)
    try:
        return TrainConfig(**values)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def load_split(data_dir, folds_path, min_usable):
    """Dataset arrays aligned to 16 frames plus the fold map; returns (X, y, ids, folds, inputs)."""
    data_dir = Path(data_dir)
    folds_path = Path(folds_path) if folds_path else data_dir / "folds.csv"
    for p in (data_dir / "dataset.json", data_dir / "dataset.csv", folds_path):
        if not p.exists():
            raise UsageError(f"missing input file {p}")
    clips, _ = fio.read_dataset(data_dir)
    folds = fio.read_folds(folds_path)
    X, y, ids, _ = prepare(clips, min_usable)
    missing = [c for c in ids if c not in folds]
    if missing:
        raise UsageError(f"clip {missing[0]!r} has no fold in {folds_path}")
    if (y < 0).any():
        raise UsageError("dataset contains unlabeled clips")
    return X, y, ids, folds, [data_dir / "dataset.json", data_dir / "dataset.csv", folds_path]


def fit_fold(X, y, ids, folds, fold, config: TrainConfig):
    train_mask = np.array([folds[c] != fold for c in ids])
    if not train_mask.any():
        raise UsageError(f"fold {fold} leaves no training clips")
    return train(X[train_mask], y[train_mask], config)


def evaluate_fold(params, X, y, ids, folds, fold):
    """Returns (MetricReport, triples, test features, test ids, test labels)."""
    test = np.array([folds[c] == fold for c in ids])
    if not test.any():
        raise UsageError(f"fold {fold} has no test clips")
    feats, logits = forward(params, X[test])
    pred = logits.argmax(axis=1)
    test_ids = [c for c, t in zip(ids, test) if t]
    triples = list(zip(test_ids, y[test].tolist(), pred.tolist()))
    return metrics(confusion(y[test], pred)), triples, feats, test_ids, y[test]


# -- commands ------------------------------------------------------------------

def cmd_gen_data(args):
    try:
        spec = DatasetSpec(
            n_clips=args.n, class_proportions=tuple(args.proportions), feature_dim=args.feature_dim,
            cluster_separation=args.separation, noise_scale=args.noise, frame_noise=args.frame_noise,
            length_range=(args.length_min, args.length_max), dropout_rate=args.dropout, seed=args.seed,
        )
        clips = synth_generate(spec)
        folds = kfold_split([c.clip_id for c in clips], args.k, args.seed,
                            labels=[c.label for c in clips], stratify=args.stratify)
    except DataError as exc:
        raise UsageError(str(exc)) from None
    run = Run(args)
    counts = class_counts(spec.class_proportions, spec.n_clips)
    fio.write_dataset(run.dir, clips, {
        "spec": spec.to_dict(),
        "seed": args.seed,
        "class_counts": counts.tolist(),
        "generator": "linear onset-to-apex class trajectories with clip offset and frame jitter",
    })
    fio.write_folds(run.dir / "folds.csv", folds)
    run.finish(_resolved(args))
    return EXIT_OK


def _train_one(job):
    """Worker: train one fold and write its artefacts into ``job['dir']``."""
    X, y, ids, folds, fold, config, out = job
    params, history = fit_fold(X, y, ids, folds, fold, config)
    out.mkdir(parents=True, exist_ok=True)
    fio.write_checkpoint(out / "checkpoint.json", params, config, {"fold": fold})
    fio.write_history(out / "history.csv", history)
    fio.write_loss_trace(out / "loss_trace.csv", history)
    return fold, history.final_loss, history.lr_decays


def _map(fn, jobs, n_workers):
    if n_workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(n_workers, len(jobs))) as pool:
        return list(pool.map(fn, jobs))


def cmd_train(args):
    X, y, ids, folds, inputs = load_split(args.data, args.folds, args.min_usable)
    fold_ids = sorted(set(folds.values()))
    if args.fold == "all":
        targets = fold_ids
    else:
        try:
            targets = [int(args.fold)]
        except ValueError:
            raise UsageError(f"--fold must be an integer or 'all', got {args.fold!r}") from None
        if targets[0] not in fold_ids:
            raise UsageError(f"fold {targets[0]} not in fold file (folds {fold_ids})")
    config = train_config_from(args)
    resolved = _resolved(args)
    if args.lr_grid:
        train_mask = np.array([folds[c] != targets[0] for c in ids])
        best, outcomes = lr_grid_search(X[train_mask], y[train_mask], args.lr_grid, config, return_outcomes=True)
        config = train_config_from(args, learning_rate=best)
        resolved["lr_grid_outcomes"] = {repr(k): (None if math.isnan(v) else v) for k, v in outcomes.items()}
        resolved["learning_rate"] = best
    run = Run(args, inputs)
    jobs = [(X, y, ids, folds, f, config, run.dir / f"fd{f}") for f in targets]
    try:
        results = _map(_train_one, jobs, args.jobs)
    except TrainingDivergedError as exc:
        record = {k: repr(v) if isinstance(v, float) and not math.isfinite(v) else v
                  for k, v in exc.record.items()}
        fio.write_json(run.dir / "diagnostic.json", {"error": str(exc), "record": record})
        raise
    resolved["train_config"] = config.to_dict()
    resolved["results"] = {f"fd{f}": {"final_loss": loss, "lr_decays": decays} for f, loss, decays in results}
    run.finish(resolved)
    return EXIT_OK


def _checkpoint_paths(items):
    paths = []
    for item in items:
        p = Path(item)
        if p.is_dir():
            found = sorted(p.glob("fd*/checkpoint.json")) or sorted(p.glob("checkpoint.json"))
            if not found:
                raise UsageError(f"no checkpoints under {p}")
            paths.extend(found)
        elif p.exists():
            paths.append(p)
        else:
            raise UsageError(f"missing checkpoint {p}")
    return paths


def cmd_eval(args):
    X, y, ids, folds, inputs = load_split(args.data, args.folds, args.min_usable)
    paths = _checkpoint_paths(args.checkpoints)
    per_fold, pooled_triples, feat_blocks, id_blocks, label_blocks = {}, {}, [], [], []
    for path in paths:
        params, _, doc = fio.read_checkpoint(path)
        fold = doc.get("fold")
        if fold is None:
            raise UsageError(f"{path} does not record its fold")
        if fold in pooled_triples:
            raise UsageError(f"two checkpoints for fold {fold}")
        if params.frame_dim != X.shape[2]:
            raise UsageError(f"{path}: model expects {params.frame_dim}-dim frames, dataset has {X.shape[2]}")
        report, triples, feats, test_ids, labels = evaluate_fold(params, X, y, ids, folds, fold)
        per_fold[f"fd{fold}"] = report.to_dict()
        pooled_triples[fold] = triples
        feat_blocks.append(feats)
        id_blocks.extend(test_ids)
        label_blocks.append(labels)
    expected = [c for c in ids if folds[c] in pooled_triples]
    try:
        pooled, cm = cv_aggregate(pooled_triples, expected_ids=expected)
    except EvaluationError as exc:
        raise UsageError(str(exc)) from None
    run = Run(args, inputs + paths)
    fio.write_json(run.dir / "metrics.json", {
        "per_fold": per_fold,
        "pooled": pooled.to_dict(),
        "coverage": {
            "folds": sorted(pooled_triples),
            "n_clips": len(expected),
            "complete_cv": sorted(pooled_triples) == sorted(set(folds[c] for c in ids)),
        },
    })
    fio.write_confusion(run.dir / "confusion.csv", cm)
    feats = np.concatenate(feat_blocks)
    try:
        coords = project_2d(feats)
    except EvaluationError as exc:
        log.warning("skipping projection: %s", exc)
    else:
        fio.write_projection(run.dir / "projection.csv", id_blocks, np.concatenate(label_blocks), coords)
    run.finish(_resolved(args))
    print(f"UAR {pooled.uar_pct:.2f}%  WAR {pooled.war_pct:.2f}%  ({len(expected)} clips)")
    return EXIT_OK


def cmd_kappa(args):
    path = Path(args.annotations)
    if not path.exists():
        raise UsageError(f"missing annotation file {path}")
    ds = fio.read_annotations(path)
    if len(ds) == 0:
        raise UsageError(f"{path} holds no items")
    if not 0 <= args.r <= ds.n_annotators:
        raise UsageError(f"--r must lie in 0..{ds.n_annotators}")
    report = kappa_report(ds)
    subset = single_labeled_subset(ds, args.r)
    run = Run(args, [path])
    fio.write_json(run.dir / "kappa.json", {**report, "r": args.r, "n_single_labeled": len(subset)})
    fio.write_single_labels(run.dir / "single_labels.csv", subset)
    run.finish(_resolved(args))
    print(f"kappa {report['kappa']:.4f} ({report['band']}); {len(subset)} single-labeled at r={args.r}")
    return EXIT_OK


def _sweep_cell(job):
    X, y, ids, folds, fold, config, out = job
    try:
        params, history = fit_fold(X, y, ids, folds, fold, config)
    except TrainingDivergedError as exc:
        return {"status": "diverged", "error": str(exc)}
    report, *_ = evaluate_fold(params, X, y, ids, folds, fold)
    out.mkdir(parents=True, exist_ok=True)
    fio.write_checkpoint(out / "checkpoint.json", params, config, {"fold": fold})
    fio.write_history(out / "history.csv", history)
    return {"status": "ok", "uar": report.uar, "war": report.war}


def cmd_sweep(args):
    X, y, ids, folds, inputs = load_split(args.data, args.folds, args.min_usable)
    if args.fold not in set(folds.values()):
        raise UsageError(f"fold {args.fold} not in fold file")
    grid = args.grid or (LAMBDA_GRID if args.axis == "lambda" else BATCH_GRID)
    if not grid:
        raise UsageError("empty grid")
    field = "lam" if args.axis == "lambda" else "batch_size"
    configs = []
    for value in grid:
        value = float(value) if field == "lam" else int(value)
        if field == "batch_size" and value != float(value):
            raise UsageError(f"batch size {value} is not an integer")
        configs.append((value, train_config_from(args, **{field: value})))
    run = Run(args, inputs)
    jobs = [(X, y, ids, folds, args.fold, cfg, run.dir / "cells" / f"{args.axis}={v:g}") for v, cfg in configs]
    results = _map(_sweep_cell, jobs, args.jobs)
    rows, failed = [], []
    for (value, _), res in zip(configs, results):
        if res["status"] == "ok":
            rows.append((value, res["uar"], res["war"]))
        else:
            rows.append((value, math.nan, math.nan))
            failed.append({"cell": value, "error": res["error"]})
    fio._write_rows(run.dir / "sweep.csv", ["cell", "uar", "war"], rows)
    fio.write_json(run.dir / "summary.json", {
        "axis": args.axis,
        "fold": args.fold,
        "cells": [{"cell": v, "uar_pct": None if math.isnan(u) else round(100 * u, 2),
                   "war_pct": None if math.isnan(w) else round(100 * w, 2)} for v, u, w in rows],
        "failed": failed,
    })
    run.finish(_resolved(args))
    for v, u, w in rows:
        print(f"{args.axis}={v:g}\tUAR {100 * u:.2f}\tWAR {100 * w:.2f}")
    if failed:
        log.warning("%d sweep cells diverged", len(failed))
    return EXIT_OK


def cmd_report(args):
    lines = ["# Run report", ""]
    inputs = []
    for item in args.runs:
        d = Path(item)
        manifest_path = d / "manifest.json"
        if not manifest_path.exists():
            raise UsageError(f"{d} is not a run directory (no manifest.json)")
        inputs.append(manifest_path)
        manifest = fio.read_json(manifest_path)
        lines.append(f"## {d.name} ({manifest['command']}, seed {manifest['seed']})")
        lines.append("")
        if (d / "metrics.json").exists():
            m = fio.read_json(d / "metrics.json")
            lines.append("| split | UAR % | WAR % |")
            lines.append("|---|---|---|")
            for name, rep in sorted(m["per_fold"].items()):
                lines.append(f"| {name} | {rep['uar_pct']:.2f} | {rep['war_pct']:.2f} |")
            lines.append(f"| pooled | {m['pooled']['uar_pct']:.2f} | {m['pooled']['war_pct']:.2f} |")
        if (d / "sweep.csv").exists():
            lines.append("| cell | UAR % | WAR % |")
            lines.append("|---|---|---|")
            for row in fio.read_csv_dicts(d / "sweep.csv"):
                lines.append(f"| {row['cell']} | {100 * float(row['uar']):.2f} | {100 * float(row['war']):.2f} |")
        if (d / "kappa.json").exists():
            k = fio.read_json(d / "kappa.json")
            lines.append(f"kappa = {k['kappa']:.4f} ({k['band']}), {k['n_items']} items, "
                         f"{k['n_single_labeled']} single-labeled at r={k['r']}")
        if manifest["command"] == "train":
            for fold, res in manifest["config"].get("results", {}).items():
                lines.append(f"- {fold}: final loss {res['final_loss']:.4f}, lr decays after epochs {res['lr_decays']}")
        lines.append("")
    run = Run(args, inputs)
    text = "\n".join(lines)
    (run.dir / "report.md").write_text(text, encoding="utf-8")
    print(text)
    run.finish(_resolved(args))
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "kappa": cmd_kappa,
    "sweep": cmd_sweep,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, AnnotationError, DataError, EvaluationError, fio.SchemaError) as exc:
        print(f"ecstfl {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDivergedError, CollapsedFeaturesError, DegenerateAgreementError) as exc:
        print(f"ecstfl {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
