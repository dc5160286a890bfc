"""Synthetic clip sequences, frame filtering, temporal alignment and folds.

Clips stand in for face videos: each frame is a feature vector, some frames
are flagged unusable (a face detector miss). Class sizes follow the
single-label class distribution of a real in-the-wild expression corpus.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

TARGET_LENGTH = 16

# happy, sad, neutral, angry, surprise, disgust, fear
DEFAULT_PROPORTIONS = (0.2063, 0.1665, 0.2246, 0.1848, 0.1242, 0.0122, 0.0814)

# named sub-streams so one seed drives independent random sources
STREAMS = {"data": 0, "init": 1, "shuffle": 2, "split": 3, "grid": 4}


def rng_for(seed: int, stream: str, *extra: int) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, STREAMS[stream], *extra])


class DataError(ValueError):
    pass


@dataclass
class ClipSequence:
    frames: np.ndarray
    usable_mask: np.ndarray
    label: int | None = None  # 0-based class index
    clip_id: str = ""
    times: np.ndarray | None = None  # frame timestamps; defaults to 0..T-1

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim == 1:
            self.frames = self.frames[:, None]
        self.usable_mask = np.asarray(self.usable_mask, dtype=bool)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise DataError(f"clip {self.clip_id!r}: frames must be (T, F) with T >= 1")
        if self.usable_mask.shape != (self.frames.shape[0],):
            raise DataError(f"clip {self.clip_id!r}: mask length != frame count")
        if self.times is None:
            self.times = np.arange(self.frames.shape[0], dtype=np.float64)
        else:
            self.times = np.asarray(self.times, dtype=np.float64)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def usable_rate(self) -> float:
        return float(self.usable_mask.mean())


@dataclass
class DatasetSpec:
    n_clips: int = 700
    class_proportions: tuple[float, ...] = DEFAULT_PROPORTIONS
    feature_dim: int = 16
    cluster_separation: float = 2.0
    noise_scale: float = 1.0
    frame_noise: float = 0.5
    length_range: tuple[int, int] = (12, 40)
    dropout_rate: float = 0.15
    seed: int = 0

    def __post_init__(self):
        self.class_proportions = tuple(float(p) for p in self.class_proportions)
        self.length_range = tuple(int(x) for x in self.length_range)
        p = np.asarray(self.class_proportions)
        if (p < 0).any() or abs(p.sum() - 1.0) > 1e-9:
            raise DataError(f"class proportions must be non-negative and sum to 1, got {p.sum()!r}")
        if self.n_clips < 1 or self.feature_dim < 1:
            raise DataError("n_clips and feature_dim must be positive")
        lo, hi = self.length_range
        if not 1 <= lo <= hi:
            raise DataError(f"invalid length range {self.length_range}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise DataError("dropout_rate must lie in [0, 1)")
        if self.noise_scale < 0 or self.frame_noise < 0 or self.cluster_separation < 0:
            raise DataError("noise and separation must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["class_proportions"] = list(self.class_proportions)
        d["length_range"] = list(self.length_range)
        return d


def class_counts(proportions: Sequence[float], n: int) -> np.ndarray:
    """Largest-remainder apportionment of ``n`` items; ties go to the lower index."""
    p = np.asarray(proportions, dtype=np.float64)
    quotas = p * n
    counts = np.floor(quotas).astype(np.int64)
    remainders = quotas - counts
    short = n - int(counts.sum())
    order = sorted(range(len(p)), key=lambda k: (-remainders[k], k))
    for k in order[:short]:
        counts[k] += 1
    return counts


def _class_templates(spec: DatasetSpec, rng: np.random.Generator, n_classes: int):
    """Per-class onset and apex vectors; a clip moves linearly between them."""
    F = spec.feature_dim
    onset = rng.normal(size=(n_classes, F))
    apex = rng.normal(size=(n_classes, F))
    # scale so the mean distance between class centroids is about `separation`
    centre = 0.5 * (onset + apex)
    spread = np.sqrt(((centre[:, None] - centre[None]) ** 2).sum(-1)).sum() / (n_classes * (n_classes - 1))
    scale = spec.cluster_separation / spread if spread > 0 else 0.0
    return onset * scale, apex * scale


def synth_generate(spec: DatasetSpec) -> list[ClipSequence]:
    """Draw a seeded synthetic clip corpus following ``spec``.

    Clip i of class k has T frames sampled along the class trajectory
    ``onset_k + tau * (apex_k - onset_k)`` for tau uniform on [0, 1], plus a
    clip-level offset of scale ``noise_scale`` and per-frame jitter of scale
    ``frame_noise * noise_scale``. Every clip draws from its own stream
    derived from (seed, clip index).
    """
    counts = class_counts(spec.class_proportions, spec.n_clips)
    p = np.asarray(spec.class_proportions)
    empty = [k for k in range(len(p)) if p[k] > 0 and counts[k] == 0]
    if empty:
        raise DataError(
            f"classes {empty} round to zero clips at n_clips={spec.n_clips}; use more clips"
        )
    n_classes = len(p)
    onset, apex = _class_templates(spec, rng_for(spec.seed, "data"), n_classes)
    labels = np.repeat(np.arange(n_classes), counts)
    lo, hi = spec.length_range
    width = len(str(spec.n_clips - 1))
    clips = []
    for i, k in enumerate(labels):
        rng = rng_for(spec.seed, "data", i + 1)
        T = int(rng.integers(lo, hi + 1))
        tau = np.linspace(0.0, 1.0, T)[:, None]
        traj = onset[k] + tau * (apex[k] - onset[k])
        offset = spec.noise_scale * rng.normal(size=spec.feature_dim)
        jitter = spec.frame_noise * spec.noise_scale * rng.normal(size=(T, spec.feature_dim))
        mask = rng.random(T) >= spec.dropout_rate
        clips.append(ClipSequence(traj + offset + jitter, mask, int(k), f"clip{i:0{width}d}"))
    return clips


@dataclass
class FilterReport:
    min_rate: float
    n_in: int
    rejected: list[tuple[str, float]] = field(default_factory=list)

    @property
    def n_retained(self) -> int:
        return self.n_in - len(self.rejected)


def usable_rate_filter(clips: Sequence[ClipSequence], min_rate: float = 0.5):
    """Drop clips whose usable-frame fraction is below ``min_rate``.

    Retained clips keep only their usable frames. Returns ``(retained, report)``.
    """
    if not 0.0 <= min_rate <= 1.0:
        raise DataError(f"min_rate must lie in [0, 1], got {min_rate}")
    retained = []
    report = FilterReport(min_rate, len(clips))
    for clip in clips:
        rate = clip.usable_rate
        if rate < min_rate or not clip.usable_mask.any():
            report.rejected.append((clip.clip_id, rate))
            continue
        if clip.usable_mask.all():
            retained.append(clip)
        else:
            keep = clip.usable_mask
            # original frame times are kept so resampling respects the gaps
            retained.append(
                ClipSequence(
                    clip.frames[keep], np.ones(keep.sum(), bool), clip.label, clip.clip_id,
                    clip.times[keep],
                )
            )
    return retained, report


def interpolate_to_length(clip: ClipSequence, target: int = TARGET_LENGTH) -> ClipSequence:
    """Piecewise-linear resampling of the usable frames onto ``target`` points.

    The grid spans the first to the last usable frame time, so both end
    frames come through unchanged. A single usable frame is repeated.
    """
    mask = clip.usable_mask
    if not mask.any():
        raise DataError(f"clip {clip.clip_id!r} has no usable frames")
    t = clip.times[mask]
    frames = clip.frames[mask]
    if len(t) == 1:
        out = np.repeat(frames, target, axis=0)
    else:
        grid = np.linspace(t[0], t[-1], target)
        out = np.column_stack([np.interp(grid, t, frames[:, f]) for f in range(frames.shape[1])])
        out[0] = frames[0]
        out[-1] = frames[-1]
    return ClipSequence(out, np.ones(target, bool), clip.label, clip.clip_id)


def prepare(clips: Sequence[ClipSequence], min_rate: float = 0.5, target: int = TARGET_LENGTH):
    """Filter then align every clip; returns (X, y, clip_ids, report).

    X has shape (n, target, F).
    """
    retained, report = usable_rate_filter(clips, min_rate)
    aligned = [interpolate_to_length(c, target) for c in retained]
    if aligned:
        X = np.stack([c.frames for c in aligned])
    else:
        F = clips[0].frames.shape[1] if clips else 0
        X = np.zeros((0, target, F))
    y = np.array([-1 if c.label is None else c.label for c in aligned], dtype=np.int64)
    ids = [c.clip_id for c in aligned]
    return X, y, ids, report


def kfold_split(
    clip_ids: Sequence[str],
    k: int = 5,
    seed: int = 0,
    labels: Sequence[int] | None = None,
    stratify: bool = False,
) -> dict[str, int]:
    """Seeded shuffle, then ``k`` contiguous parts with sizes within 1.

    Returns a mapping clip_id -> fold in 1..k. With ``stratify`` the shuffled
    clips are grouped by label before being dealt out round-robin, which
    keeps fold sizes within 1 and class counts per fold within 1.
    """
    ids = list(clip_ids)
    n = len(ids)
    if len(set(ids)) != n:
        raise DataError("duplicate clip ids")
    if k < 1 or n < k:
        raise DataError(f"need at least k={k} clips, got {n}")
    order = rng_for(seed, "split").permutation(n)
    if stratify:
        if labels is None:
            raise DataError("stratify needs labels")
        labels = np.asarray(labels)
        order = order[np.argsort(labels[order], kind="stable")]
        return {ids[j]: pos % k + 1 for pos, j in enumerate(order)}
    folds = {}
    for fold, part in enumerate(np.array_split(order, k), start=1):
        for j in part:
            folds[ids[j]] = fold
    return folds
