"""A small clip classifier and its deterministic mini-batch trainer.

Per-frame encoder (two tanh affine layers), mean pooling over time, a tanh
hidden layer whose output is the clip feature, and a linear classifier.
Gradients are written out by hand; everything is float64 and seeded.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .data import TARGET_LENGTH, rng_for
from .losses import (
    ClassCenters,
    CollapsedFeaturesError,
    center_loss,
    ec_stfl_loss,
    softmax_xent,
)

log = logging.getLogger(__name__)

LOSS_MODES = ("softmax", "softmax+ecstfl", "softmax+center")
PARAM_NAMES = ("W1", "b1", "W2", "b2", "W3", "b3", "W4", "b4")
N_CLASSES = 7


class TrainingDivergedError(FloatingPointError):
    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record or {}


@dataclass
class TrainConfig:
    learning_rate: float = 0.2
    lr_decay_factor: float = 10.0
    patience_epochs: int = 3
    min_improvement: float = 1e-4
    batch_size: int = 24
    lam: float = 10.0
    epochs: int = 80
    seed: int = 0
    loss_mode: str = "softmax+ecstfl"
    center_coef: float = 1e-4
    center_rate: float = 0.5
    frame_hidden: int = 32
    feature_dim: int = 64

    def __post_init__(self):
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}, got {self.loss_mode!r}")
        if self.lr_decay_factor != 10.0:
            raise ValueError("lr_decay_factor is fixed at 10")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.epochs < 1 or self.patience_epochs < 1:
            raise ValueError("batch_size, epochs and patience_epochs must be positive")
        if self.lam < 0 or self.min_improvement < 0 or self.center_coef < 0:
            raise ValueError("lam, min_improvement and center_coef must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class EncoderParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    W3: np.ndarray
    b3: np.ndarray
    W4: np.ndarray
    b4: np.ndarray

    @property
    def frame_dim(self) -> int:
        return self.W1.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.W3.shape[1]

    def shape(self) -> dict:
        return {
            "frame_dim": self.W1.shape[0],
            "frame_hidden": self.W1.shape[1],
            "feature_dim": self.W3.shape[1],
            "n_classes": self.W4.shape[1],
            "n_frames": TARGET_LENGTH,
            "nonlinearity": "tanh",
        }

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> "EncoderParams":
        return EncoderParams(**{k: v.copy() for k, v in self.arrays().items()})


def init_params(frame_dim, frame_hidden=32, feature_dim=64, n_classes=N_CLASSES, seed=0):
    """Uniform(-a, a) weights and biases with a = 1/sqrt(fan_in)."""
    rng = rng_for(seed, "init")
    dims = [(frame_dim, frame_hidden), (frame_hidden, frame_hidden),
            (frame_hidden, feature_dim), (feature_dim, n_classes)]
    arrays = {}
    for layer, (fan_in, fan_out) in enumerate(dims, start=1):
        a = 1.0 / math.sqrt(fan_in)
        arrays[f"W{layer}"] = rng.uniform(-a, a, size=(fan_in, fan_out))
        arrays[f"b{layer}"] = rng.uniform(-a, a, size=fan_out)
    return EncoderParams(**arrays)


def _forward(params: EncoderParams, clips: np.ndarray):
    h1 = np.tanh(clips @ params.W1 + params.b1)
    h2 = np.tanh(h1 @ params.W2 + params.b2)
    pooled = h2.mean(axis=1)
    feats = np.tanh(pooled @ params.W3 + params.b3)
    logits = feats @ params.W4 + params.b4
    return feats, logits, (clips, h1, h2, pooled)


def forward(params: EncoderParams, clips: np.ndarray):
    """Features and logits for a (16, F) clip or an (n, 16, F) batch."""
    clips = np.asarray(clips, dtype=np.float64)
    single = clips.ndim == 2
    if single:
        clips = clips[None]
    if clips.ndim != 3 or clips.shape[1] != TARGET_LENGTH:
        raise ValueError(
            f"expected {TARGET_LENGTH} frames per clip, got shape {clips.shape}; "
            "align clips with data.interpolate_to_length first"
        )
    if clips.shape[2] != params.frame_dim:
        raise ValueError(f"frame dim {clips.shape[2]} does not match model input {params.frame_dim}")
    feats, logits, _ = _forward(params, clips)
    if single:
        return feats[0], logits[0]
    return feats, logits


def backward(params: EncoderParams, cache, feats, grad_logits, grad_feats=None) -> EncoderParams:
    """Parameter gradients given dL/dlogits and an extra dL/dfeatures term."""
    clips, h1, h2, pooled = cache
    B, T, _ = clips.shape
    g = {}
    g["W4"] = feats.T @ grad_logits
    g["b4"] = grad_logits.sum(axis=0)
    gx = grad_logits @ params.W4.T
    if grad_feats is not None:
        gx = gx + grad_feats
    ga3 = gx * (1.0 - feats**2)
    g["W3"] = pooled.T @ ga3
    g["b3"] = ga3.sum(axis=0)
    gh2 = np.broadcast_to((ga3 @ params.W3.T)[:, None, :] / T, h2.shape)
    ga2 = gh2 * (1.0 - h2**2)
    g["W2"] = h1.reshape(B * T, -1).T @ ga2.reshape(B * T, -1)
    g["b2"] = ga2.sum(axis=(0, 1))
    ga1 = (ga2 @ params.W2.T) * (1.0 - h1**2)
    g["W1"] = clips.reshape(B * T, -1).T @ ga1.reshape(B * T, -1)
    g["b1"] = ga1.sum(axis=(0, 1))
    return EncoderParams(**g)


def predict(params: EncoderParams, X: np.ndarray) -> np.ndarray:
    return forward(params, X)[1].argmax(axis=1)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    L_s: float
    L_ecstfl: float
    L_center: float
    L_total: float
    skipped_batches: int


@dataclass
class StepRecord:
    step: int
    L_s: float
    L_ecstfl: float
    L_total: float
    skipped: bool


@dataclass
class TrainHistory:
    epochs: list[EpochRecord] = field(default_factory=list)
    steps: list[StepRecord] = field(default_factory=list)
    lr_decays: list[int] = field(default_factory=list)  # epochs after which lr was divided

    @property
    def final_loss(self) -> float:
        return self.epochs[-1].L_total

    def as_rows(self) -> list[dict]:
        return [asdict(r) for r in self.epochs]


def batch_loss(params, clips, labels, config: TrainConfig, centers: ClassCenters | None = None):
    """Loss terms and parameter gradients for one mini-batch.

    Returns (grads, L_s, L_ecstfl, L_center, L_total, skipped). The EC-STFL
    gradient reaches the classifier only through the features, never W4/b4.
    """
    feats, logits, cache = _forward(params, clips)
    if not (np.isfinite(feats).all() and np.isfinite(logits).all()):
        raise TrainingDivergedError("non-finite features or logits")
    ce = softmax_xent(logits, labels)
    L_ec = L_c = 0.0
    skipped = False
    grad_feats = None
    if config.loss_mode == "softmax+ecstfl" and config.lam > 0:
        ec = ec_stfl_loss(feats, labels)
        skipped = ec.skipped
        L_ec = ec.value
        if not skipped:
            grad_feats = config.lam * ec.grad
    elif config.loss_mode == "softmax+center":
        cl = center_loss(feats, labels, centers)
        L_c = cl.value
        grad_feats = config.center_coef * cl.grad
    total = ce.value + (0.0 if skipped else config.lam * L_ec) + config.center_coef * L_c
    grads = backward(params, cache, feats, ce.grad, grad_feats)
    return grads, ce.value, L_ec, L_c, total, skipped


# divergence is detected explicitly below, so overflow warnings are noise
@np.errstate(over="ignore", invalid="ignore")
def train(X, y, config: TrainConfig, params: EncoderParams | None = None):
    """Mini-batch gradient descent; returns (params, history).

    Each epoch visits the clips in a fresh seeded order, last partial batch
    included. After ``patience_epochs`` consecutive epochs whose mean loss
    fails to beat the best so far by ``min_improvement`` the learning rate is
    divided by 10.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.shape[0] == 0:
        raise ValueError("empty training set")
    if X.ndim != 3 or X.shape[1] != TARGET_LENGTH:
        raise ValueError(f"training clips must have shape (n, {TARGET_LENGTH}, F), got {X.shape}")
    if params is None:
        params = init_params(X.shape[2], config.frame_hidden, config.feature_dim, seed=config.seed)
    else:
        params = params.copy()
    centers = None
    if config.loss_mode == "softmax+center":
        centers = ClassCenters.zeros(params.W4.shape[1], params.feature_dim, config.center_rate)

    shuffle = rng_for(config.seed, "shuffle")
    lr = config.learning_rate
    best = math.inf
    stale = 0
    history = TrainHistory()
    step = 0
    n = X.shape[0]
    for epoch in range(1, config.epochs + 1):
        order = shuffle.permutation(n)
        sums = np.zeros(4)
        n_batches = skipped_batches = 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            try:
                grads, L_s, L_ec, L_c, total, skipped = batch_loss(params, X[idx], y[idx], config, centers)
            except (CollapsedFeaturesError, TrainingDivergedError) as exc:
                raise TrainingDivergedError(
                    f"{exc} at epoch {epoch}, step {step}",
                    {"epoch": epoch, "step": step, "lr": lr},
                ) from exc
            if not math.isfinite(total):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, step {step}",
                    {"epoch": epoch, "step": step, "lr": lr, "L_s": L_s, "L_ecstfl": L_ec},
                )
            for name in PARAM_NAMES:
                setattr(params, name, getattr(params, name) - lr * getattr(grads, name))
            if not all(np.isfinite(p).all() for p in params.arrays().values()):
                raise TrainingDivergedError(
                    f"non-finite parameters after epoch {epoch}, step {step}",
                    {"epoch": epoch, "step": step, "lr": lr, "L_total": total},
                )
            history.steps.append(StepRecord(step, L_s, L_ec, total, skipped))
            sums += (L_s, L_ec, L_c, total)
            n_batches += 1
            skipped_batches += skipped
            step += 1
        means = sums / n_batches
        history.epochs.append(EpochRecord(epoch, lr, *means.tolist(), skipped_batches))
        if means[3] < best - config.min_improvement:
            best = means[3]
            stale = 0
        else:
            stale += 1
            if stale >= config.patience_epochs:
                lr /= config.lr_decay_factor
                stale = 0
                history.lr_decays.append(epoch)
                log.debug("epoch %d: loss saturated, lr -> %g", epoch, lr)
    return params, history


def validation_loss(params, X, y) -> float:
    return softmax_xent(forward(params, X)[1], y).value


def lr_grid_search(X, y, grid, config: TrainConfig, budget_epochs: int = 5,
                   val_fraction: float = 0.2, return_outcomes: bool = False):
    """Pick the learning rate with the lowest validation softmax loss.

    Each rate trains for ``budget_epochs`` on a seeded split of (X, y).
    Diverging rates are dropped; ties go to the smaller rate.
    """
    grid = sorted(float(r) for r in grid)
    if not grid:
        raise ValueError("empty learning-rate grid")
    X = np.asarray(X)
    y = np.asarray(y)
    n = X.shape[0]
    order = rng_for(config.seed, "grid").permutation(n)
    n_val = max(1, int(round(val_fraction * n))) if n > 1 else 0
    val, tr = order[:n_val], order[n_val:]
    if len(tr) == 0:
        tr = val
    outcomes = {}
    for rate in grid:
        cfg = TrainConfig.from_dict({**config.to_dict(), "learning_rate": rate, "epochs": budget_epochs})
        try:
            params, _ = train(X[tr], y[tr], cfg)
            loss = validation_loss(params, X[val], y[val])
        except TrainingDivergedError:
            loss = math.nan
        outcomes[rate] = loss if math.isfinite(loss) else math.nan
    finite = [(loss, rate) for rate, loss in outcomes.items() if not math.isnan(loss)]
    if not finite:
        raise TrainingDivergedError(f"every learning rate diverged: {outcomes}", {"outcomes": outcomes})
    best = min(finite)[1]
    return (best, outcomes) if return_outcomes else best
