"""End-to-end cross-validation runs used by the CLI, scripts and acceptance tests."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import DatasetSpec, kfold_split, prepare, synth_generate
from .evaluation import MetricReport, confusion, cv_aggregate, metrics
from .model import TrainConfig, forward, train


@dataclass
class FoldResult:
    fold: int
    report: MetricReport
    triples: list[tuple[str, int, int]]
    final_loss: float


def run_fold(X, y, ids, folds: dict[str, int], fold: int, config: TrainConfig) -> FoldResult:
    in_test = np.array([folds[c] == fold for c in ids])
    params, history = train(X[~in_test], y[~in_test], config)
    feats, logits = forward(params, X[in_test])
    pred = logits.argmax(axis=1)
    test_ids = [c for c, t in zip(ids, in_test) if t]
    truth = y[in_test]
    triples = list(zip(test_ids, truth.tolist(), pred.tolist()))
    return FoldResult(fold, metrics(confusion(truth, pred)), triples, history.final_loss)


def cross_validate(spec: DatasetSpec, config: TrainConfig, k: int = 5, min_rate: float = 0.5,
                   split_seed: int | None = None):
    """Generate, filter, align, split and train/test every fold.

    Returns (pooled MetricReport, list of FoldResult).
    """
    clips = synth_generate(spec)
    X, y, ids, _ = prepare(clips, min_rate)
    folds = kfold_split(ids, k, spec.seed if split_seed is None else split_seed)
    results = [run_fold(X, y, ids, folds, f, config) for f in range(1, k + 1)]
    pooled, _ = cv_aggregate({r.fold: r.triples for r in results}, expected_ids=ids)
    return pooled, results
