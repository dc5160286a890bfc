"""Annotation aggregation, threshold labeling and Fleiss's kappa.

Each clip is labeled by ``n`` independent annotators with one of seven
emotion categories. Votes are tallied into a 7-component count vector; a
clip receives a single label when one category collects strictly more than
``r`` votes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

EMOTIONS = ("happy", "sad", "neutral", "angry", "surprise", "disgust", "fear")
N_CATEGORIES = len(EMOTIONS)
DEFAULT_ANNOTATORS = 10
DEFAULT_THRESHOLD = 6

KAPPA_BANDS = (
    (0.20, "Slight agreement"),
    (0.40, "Fair agreement"),
    (0.60, "Moderate agreement"),
    (0.80, "Substantial agreement"),
    (1.00, "Almost perfect agreement"),
)


class AnnotationError(ValueError):
    """Malformed votes, counts or datasets."""


class AmbiguousLabelError(AnnotationError):
    """More than one category clears the labeling threshold."""


class DegenerateAgreementError(ArithmeticError):
    """Expected agreement equals one, so kappa is 0/0."""


def category_name(index: int) -> str:
    """Name of a 1-based emotion category index."""
    if not 1 <= index <= N_CATEGORIES:
        raise AnnotationError(f"category index {index} outside 1..{N_CATEGORIES}")
    return EMOTIONS[index - 1]


@dataclass(frozen=True)
class EmotionDistribution:
    counts: tuple[int, ...]
    n_annotators: int = DEFAULT_ANNOTATORS

    def __post_init__(self):
        counts = tuple(int(c) for c in self.counts)
        if len(counts) != N_CATEGORIES:
            raise AnnotationError(f"expected {N_CATEGORIES} counts, got {len(counts)}")
        if any(c < 0 for c in counts):
            raise AnnotationError(f"negative count in {counts}")
        if self.n_annotators < 1:
            raise AnnotationError("n_annotators must be positive")
        if sum(counts) != self.n_annotators:
            raise AnnotationError(
                f"counts {counts} sum to {sum(counts)}, expected {self.n_annotators}"
            )
        object.__setattr__(self, "counts", counts)

    @classmethod
    def from_counts(cls, counts: Sequence[int]) -> "EmotionDistribution":
        return cls(tuple(counts), int(sum(counts)))

    def as_array(self) -> np.ndarray:
        return np.asarray(self.counts, dtype=np.int64)


@dataclass
class AnnotatedDataset:
    items: list[tuple[str, EmotionDistribution]] = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        n_values = set()
        for clip_id, dist in self.items:
            if clip_id in seen:
                raise AnnotationError(f"duplicate clip_id {clip_id!r}")
            seen.add(clip_id)
            n_values.add(dist.n_annotators)
        if len(n_values) > 1:
            raise AnnotationError(f"items disagree on n_annotators: {sorted(n_values)}")

    def __len__(self):
        return len(self.items)

    @property
    def n_annotators(self) -> int:
        if not self.items:
            raise AnnotationError("empty dataset")
        return self.items[0][1].n_annotators

    def count_matrix(self) -> np.ndarray:
        """N x 7 matrix of vote counts."""
        return np.array([d.counts for _, d in self.items], dtype=np.int64).reshape(
            -1, N_CATEGORIES
        )


def tally(votes: Iterable[int], n_annotators: int = DEFAULT_ANNOTATORS) -> EmotionDistribution:
    """Count per-annotator votes (1-based category indices) into a distribution."""
    votes = list(votes)
    if len(votes) != n_annotators:
        raise AnnotationError(f"expected {n_annotators} votes, got {len(votes)}")
    counts = [0] * N_CATEGORIES
    for pos, v in enumerate(votes):
        if isinstance(v, bool) or int(v) != v or not 1 <= v <= N_CATEGORIES:
            raise AnnotationError(f"vote {v!r} at index {pos} outside 1..{N_CATEGORIES}")
        counts[int(v) - 1] += 1
    return EmotionDistribution(tuple(counts), n_annotators)


def single_label(dist: EmotionDistribution, r: int = DEFAULT_THRESHOLD) -> int | None:
    """Return the 1-based category whose count is strictly above ``r``, else None.

    Raises AmbiguousLabelError when several categories clear the threshold,
    which can only happen for ``r < n/2``.
    """
    if not 0 <= r <= dist.n_annotators:
        raise AnnotationError(f"threshold {r} outside 0..{dist.n_annotators}")
    winners = [k + 1 for k, c in enumerate(dist.counts) if c > r]
    if len(winners) > 1:
        names = ", ".join(category_name(k) for k in winners)
        raise AmbiguousLabelError(f"counts {dist.counts} exceed r={r} for {names}")
    return winners[0] if winners else None


def category_proportions(ds: AnnotatedDataset) -> np.ndarray:
    counts = ds.count_matrix()
    if counts.shape[0] == 0:
        raise AnnotationError("empty dataset")
    return counts.sum(axis=0) / float(counts.shape[0] * ds.n_annotators)


def per_item_agreement(dist: EmotionDistribution) -> float:
    """Fraction of ordered annotator pairs that agree on this item."""
    n = dist.n_annotators
    if n < 2:
        raise AnnotationError("pairwise agreement needs at least 2 annotators")
    c = dist.as_array()
    return float((c @ c - n) / (n * (n - 1)))


def _agreement_terms(ds: AnnotatedDataset) -> tuple[np.ndarray, float, float]:
    n = ds.n_annotators
    if n < 2:
        raise AnnotationError("pairwise agreement needs at least 2 annotators")
    counts = ds.count_matrix()
    p = category_proportions(ds)
    p_item = ((counts * counts).sum(axis=1) - n) / float(n * (n - 1))
    return p, float(p_item.mean()), float(p @ p)


def fleiss_kappa(ds: AnnotatedDataset) -> float:
    _, p_bar, pe_bar = _agreement_terms(ds)
    if pe_bar == 1.0:
        raise DegenerateAgreementError(
            "all assignments fall in one category: kappa = 0/0 is undefined"
        )
    return (p_bar - pe_bar) / (1.0 - pe_bar)


def interpret_kappa(kappa: float) -> str:
    """Agreement band for a kappa value.

    Bands are closed on the right: (0.60, 0.80] is substantial. Values in
    [0, 0.20] count as slight.
    """
    if not np.isfinite(kappa):
        raise ValueError(f"kappa must be finite, got {kappa}")
    if kappa > 1.0:
        raise ValueError(f"kappa cannot exceed 1, got {kappa}")
    if kappa < 0.0:
        return "Poor agreement"
    for upper, band in KAPPA_BANDS:
        if kappa <= upper:
            return band
    raise AssertionError("unreachable")


def kappa_report(ds: AnnotatedDataset) -> dict:
    """Summary fields written to the kappa JSON report."""
    p, p_bar, pe_bar = _agreement_terms(ds)
    kappa = fleiss_kappa(ds)
    return {
        "n_items": len(ds),
        "n_annotators": ds.n_annotators,
        "p": [float(x) for x in p],
        "p_bar": p_bar,
        "pe_bar": pe_bar,
        "kappa": kappa,
        "band": interpret_kappa(kappa),
    }


def single_labeled_subset(ds: AnnotatedDataset, r: int = DEFAULT_THRESHOLD) -> list[tuple[str, int]]:
    out = []
    for clip_id, dist in ds.items:
        label = single_label(dist, r)
        if label is not None:
            out.append((clip_id, label))
    return out
