"""Confusion matrices, UAR/WAR, pooled cross-validation metrics, 2-D projection."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

N_CLASSES = 7


class EvaluationError(ValueError):
    pass


def confusion(truth, pred, n_classes: int = N_CLASSES) -> np.ndarray:
    """Counts with rows = ground truth, columns = prediction."""
    truth = np.asarray(truth, dtype=np.int64).ravel()
    pred = np.asarray(pred, dtype=np.int64).ravel()
    if truth.shape != pred.shape:
        raise EvaluationError(f"length mismatch: {truth.size} truths vs {pred.size} predictions")
    for name, arr in (("truth", truth), ("pred", pred)):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise EvaluationError(f"{name} labels outside 0..{n_classes - 1}")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (truth, pred), 1)
    return cm


@dataclass
class MetricReport:
    per_class_recall: np.ndarray  # NaN for classes without ground-truth samples
    uar: float
    war: float
    n_per_class: np.ndarray
    excluded_classes: list[int]

    @property
    def uar_pct(self) -> float:
        return round(100.0 * self.uar, 2)

    @property
    def war_pct(self) -> float:
        return round(100.0 * self.war, 2)

    def to_dict(self) -> dict:
        return {
            "uar": self.uar,
            "war": self.war,
            "uar_pct": self.uar_pct,
            "war_pct": self.war_pct,
            "per_class_recall": [None if np.isnan(r) else float(r) for r in self.per_class_recall],
            "n_per_class": [int(n) for n in self.n_per_class],
            "excluded_classes": list(self.excluded_classes),
        }


def metrics(cm) -> MetricReport:
    """UAR averages recall over classes that have ground truth; WAR is accuracy."""
    cm = np.asarray(cm)
    total = cm.sum()
    if total <= 0:
        raise EvaluationError("confusion matrix is empty")
    rows = cm.sum(axis=1)
    present = rows > 0
    recall = np.full(len(rows), np.nan)
    recall[present] = np.diag(cm)[present] / rows[present]
    return MetricReport(
        per_class_recall=recall,
        uar=float(recall[present].mean()),
        war=float(np.trace(cm) / total),
        n_per_class=rows.astype(np.int64),
        excluded_classes=[int(k) for k in np.flatnonzero(~present)],
    )


def cv_aggregate(fold_predictions: Mapping[int, Sequence[tuple[str, int, int]]],
                 expected_ids: Sequence[str] | None = None,
                 n_classes: int = N_CLASSES):
    """Pool (clip_id, truth, pred) triples from every fold into one report.

    Returns (pooled MetricReport, pooled confusion matrix). Each clip must
    appear exactly once; with ``expected_ids`` every listed clip must appear.
    """
    seen = {}
    truth, pred = [], []
    for fold, triples in fold_predictions.items():
        for clip_id, t, p in triples:
            if clip_id in seen:
                raise EvaluationError(f"clip {clip_id!r} predicted in folds {seen[clip_id]} and {fold}")
            seen[clip_id] = fold
            truth.append(t)
            pred.append(p)
    if expected_ids is not None:
        missing = [c for c in expected_ids if c not in seen]
        if missing:
            raise EvaluationError(f"{len(missing)} clips lack predictions, first {missing[0]!r}")
        extra = set(seen) - set(expected_ids)
        if extra:
            raise EvaluationError(f"unexpected clip {sorted(extra)[0]!r} in predictions")
    cm = confusion(truth, pred, n_classes)
    return metrics(cm), cm


def project_2d(features) -> np.ndarray:
    """Coordinates on the top two principal directions of centred features.

    Each direction is flipped so its largest-magnitude entry is positive.
    """
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2 or X.shape[1] < 2:
        raise EvaluationError(f"need at least 2 samples of dimension >= 2, got shape {X.shape}")
    Xc = X - X.mean(axis=0)
    _, s, Vt = np.linalg.svd(Xc, full_matrices=False)
    if s[0] <= 1e-12 * max(1.0, np.abs(X).max()):
        raise EvaluationError("features have rank 0 after centring")
    V = Vt[:2].copy()
    for row in V:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1
    return Xc @ V.T
