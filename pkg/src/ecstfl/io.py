"""Readers and writers for every file the toolkit exchanges.

Labels are stored 1-based (1=happy ... 7=fear) in files and 0-based in
arrays. Floats are written with ``repr`` so a write/read cycle is exact.
"""

from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path

import numpy as np

from .annotation import (
    EMOTIONS,
    N_CATEGORIES,
    AnnotatedDataset,
    AnnotationError,
    EmotionDistribution,
    tally,
)
from .data import ClipSequence, DataError
from .model import PARAM_NAMES, EncoderParams, TrainConfig, TrainHistory

CHECKPOINT_FORMAT = "ecstfl-checkpoint"
CHECKPOINT_VERSION = 1


class SchemaError(ValueError):
    def __init__(self, path, line, message):
        super().__init__(f"{path}:{line}: {message}")
        self.path = path
        self.line = line


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_json(path, obj):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True, allow_nan=False)
        f.write("\n")


def read_json(path):
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def _int_field(path, line, name, value):
    try:
        return int(value)
    except ValueError:
        raise SchemaError(path, line, f"{name}={value!r} is not an integer") from None


# -- annotations -------------------------------------------------------------

def read_annotations(path) -> AnnotatedDataset:
    """Parse a count file (``clip_id,c1..c7``) or a vote file (``clip_id,v1..vN``)."""
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    if not rows:
        raise SchemaError(path, 1, "empty file")
    header = [h.strip() for h in rows[0]]
    count_header = ["clip_id"] + [f"c{k}" for k in range(1, N_CATEGORIES + 1)]
    n_votes = len(header) - 1
    vote_header = ["clip_id"] + [f"v{k}" for k in range(1, n_votes + 1)]
    if header == count_header:
        mode = "counts"
    elif n_votes >= 2 and header == vote_header:
        mode = "votes"
    else:
        raise SchemaError(path, 1, f"header must be {','.join(count_header)} or clip_id,v1..vN, got {','.join(header)}")
    items = []
    seen = {}
    n_annotators = None
    for line, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise SchemaError(path, line, f"expected {len(header)} fields, got {len(row)}")
        clip_id = row[0].strip()
        if not clip_id:
            raise SchemaError(path, line, "empty clip_id")
        if clip_id in seen:
            raise SchemaError(path, line, f"clip_id {clip_id!r} already defined on line {seen[clip_id]}")
        seen[clip_id] = line
        values = [_int_field(path, line, header[j + 1], v) for j, v in enumerate(row[1:])]
        try:
            if mode == "counts":
                dist = EmotionDistribution.from_counts(values)
            else:
                dist = tally(values, len(values))
        except AnnotationError as exc:
            raise SchemaError(path, line, str(exc)) from None
        if n_annotators is None:
            n_annotators = dist.n_annotators
        elif dist.n_annotators != n_annotators:
            raise SchemaError(path, line, f"{dist.n_annotators} annotations, earlier rows have {n_annotators}")
        items.append((clip_id, dist))
    return AnnotatedDataset(items)


def write_annotation_counts(path, ds: AnnotatedDataset):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["clip_id"] + [f"c{k}" for k in range(1, N_CATEGORIES + 1)])
        for clip_id, dist in ds.items:
            w.writerow([clip_id, *dist.counts])


def write_single_labels(path, items):
    """Rows ``clip_id,label,category`` with 1-based labels."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["clip_id", "label", "category"])
        for clip_id, label in items:
            w.writerow([clip_id, label, EMOTIONS[label - 1]])


# -- clip datasets -----------------------------------------------------------

def write_dataset(directory, clips, metadata: dict):
    """``dataset.json`` metadata plus ``dataset.csv`` with one row per frame."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    F = clips[0].frames.shape[1]
    write_json(directory / "dataset.json", {**metadata, "feature_dim": F, "n_clips": len(clips)})
    with open(directory / "dataset.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["clip_id", "label", "t"] + [f"f{j}" for j in range(1, F + 1)] + ["usable"])
        for clip in clips:
            label = "" if clip.label is None else clip.label + 1
            for t in range(clip.n_frames):
                w.writerow([clip.clip_id, label, t, *map(repr, clip.frames[t].tolist()),
                            int(clip.usable_mask[t])])


def read_dataset(directory):
    """Returns (clips, metadata)."""
    directory = Path(directory)
    meta = read_json(directory / "dataset.json")
    path = directory / "dataset.csv"
    with open(path, newline="", encoding="utf-8") as f:
        rows = csv.reader(f)
        header = next(rows, None)
        if header is None or header[:3] != ["clip_id", "label", "t"] or header[-1] != "usable":
            raise SchemaError(path, 1, "header must be clip_id,label,t,f1..fF,usable")
        F = len(header) - 4
        if header[3:-1] != [f"f{j}" for j in range(1, F + 1)]:
            raise SchemaError(path, 1, "feature columns must be f1..fF")
        groups: dict[str, list] = {}
        labels: dict[str, int | None] = {}
        for line, row in enumerate(rows, start=2):
            if len(row) != len(header):
                raise SchemaError(path, line, f"expected {len(header)} fields, got {len(row)}")
            clip_id, label = row[0], row[1]
            t = _int_field(path, line, "t", row[2])
            lab = None if label == "" else _int_field(path, line, "label", label) - 1
            if lab is not None and not 0 <= lab < N_CATEGORIES:
                raise SchemaError(path, line, f"label {label} outside 1..{N_CATEGORIES}")
            if clip_id in labels and labels[clip_id] != lab:
                raise SchemaError(path, line, f"clip {clip_id!r} changes label")
            labels[clip_id] = lab
            frames = groups.setdefault(clip_id, [])
            if t != len(frames):
                raise SchemaError(path, line, f"clip {clip_id!r}: expected t={len(frames)}, got {t}")
            try:
                vec = [float(v) for v in row[3:-1]]
            except ValueError:
                raise SchemaError(path, line, "non-numeric feature value") from None
            if row[-1] not in ("0", "1"):
                raise SchemaError(path, line, f"usable must be 0 or 1, got {row[-1]!r}")
            frames.append((vec, row[-1] == "1"))
    clips = [
        ClipSequence(np.array([v for v, _ in fr]), np.array([u for _, u in fr]), labels[cid], cid)
        for cid, fr in groups.items()
    ]
    return clips, meta


def write_folds(path, folds: dict[str, int]):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["clip_id", "fold"])
        for clip_id, fold in folds.items():
            w.writerow([clip_id, fold])


def read_folds(path) -> dict[str, int]:
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0] != ["clip_id", "fold"]:
        raise SchemaError(path, 1, "header must be clip_id,fold")
    folds = {}
    for line, row in enumerate(rows[1:], start=2):
        if len(row) != 2:
            raise SchemaError(path, line, "expected 2 fields")
        if row[0] in folds:
            raise SchemaError(path, line, f"clip {row[0]!r} assigned twice")
        folds[row[0]] = _int_field(path, line, "fold", row[1])
    return folds


# -- checkpoints and traces ----------------------------------------------------

def write_checkpoint(path, params: EncoderParams, config: TrainConfig, extra: dict | None = None):
    arrays = {
        name: {"shape": list(a.shape), "data": a.ravel().tolist()}
        for name, a in params.arrays().items()
    }
    write_json(path, {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "architecture": params.shape(),
        "config": config.to_dict(),
        "seed": config.seed,
        "params": arrays,
        **(extra or {}),
    })


def read_checkpoint(path):
    """Returns (params, config, full JSON document)."""
    doc = read_json(path)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"{path}: not a checkpoint file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    arrays = {
        name: np.array(doc["params"][name]["data"], dtype=np.float64).reshape(doc["params"][name]["shape"])
        for name in PARAM_NAMES
    }
    return EncoderParams(**arrays), TrainConfig.from_dict(doc["config"]), doc


def _write_rows(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def write_history(path, history: TrainHistory):
    _write_rows(
        path,
        ["epoch", "lr", "L_s", "L_ecstfl", "L_total", "skipped_batches", "L_center"],
        [(r.epoch, r.lr, r.L_s, r.L_ecstfl, r.L_total, r.skipped_batches, r.L_center)
         for r in history.epochs],
    )


def write_loss_trace(path, history: TrainHistory):
    _write_rows(
        path,
        ["step", "L_s", "L_ecstfl", "L_total", "skipped"],
        [(s.step, s.L_s, s.L_ecstfl, s.L_total, int(s.skipped)) for s in history.steps],
    )


def write_confusion(path, cm):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["truth\\pred", *EMOTIONS])
        for name, row in zip(EMOTIONS, np.asarray(cm)):
            w.writerow([name, *row.tolist()])


def write_projection(path, clip_ids, labels, coords):
    _write_rows(
        path,
        ["clip_id", "label", "px", "py"],
        [(c, int(l) + 1, float(x), float(y)) for c, l, (x, y) in zip(clip_ids, labels, coords)],
    )


def read_csv_dicts(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))

