"""EC-STFL, softmax cross-entropy and center loss with analytic gradients.

All losses take a feature matrix ``X`` of shape (n, d) and integer class
labels, and return a :class:`LossResult` holding the value and the gradient
with respect to their matrix input. Everything runs in float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class CollapsedFeaturesError(FloatingPointError):
    """Every cross-class pair sits at distance zero, so the ratio is undefined."""


@dataclass
class LossResult:
    value: float
    grad: np.ndarray
    skipped: bool = False


@dataclass
class JointLossResult:
    value: float
    softmax_value: float
    aux_value: float
    grad_logits: np.ndarray
    grad_features: np.ndarray
    skipped: bool = False


@dataclass
class ClassCenters:
    """Per-class feature centers, updated by the batch mean rule."""

    centers: np.ndarray
    update_rate: float = 0.5

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.float64)
        if self.centers.ndim != 2:
            raise ValueError("centers must be a (n_classes, d) matrix")
        if not 0.0 < self.update_rate <= 1.0:
            raise ValueError(f"update_rate must lie in (0, 1], got {self.update_rate}")
        if not np.isfinite(self.centers).all():
            raise ValueError("centers must be finite")

    @classmethod
    def zeros(cls, n_classes: int, dim: int, update_rate: float = 0.5) -> "ClassCenters":
        return cls(np.zeros((n_classes, dim)), update_rate)


def _check_batch(X, labels):
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels)
    if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
        raise ValueError(f"features must be a non-empty (n, d) matrix, got shape {X.shape}")
    if labels.shape != (X.shape[0],):
        raise ValueError(f"expected {X.shape[0]} labels, got shape {labels.shape}")
    if not np.isfinite(X).all():
        raise ValueError("features contain NaN or Inf")
    return X, labels


def _weighted_distance_sum(X, D, W):
    """Value and gradient of sum_ij W_ij * ||x_i - x_j|| given distances D."""
    # exactly rounded sum keeps the value smooth enough for finite differences
    value = math.fsum((W * D).ravel())
    # d||x_i - x_j|| / dx_i = (x_i - x_j) / D_ij; zero-distance pairs contribute 0
    with np.errstate(divide="ignore", invalid="ignore"):
        M = np.where(D > 0, (W + W.T) / D, 0.0)
    grad = M.sum(axis=1)[:, None] * X - M @ X
    return value, grad


def pairwise_distances(X: np.ndarray) -> np.ndarray:
    diff = X[:, None, :] - X[None, :, :]
    return np.sqrt((diff * diff).sum(axis=-1))


def ec_stfl_loss(X, labels) -> LossResult:
    """Class-balanced intra/inter distance ratio over a mini-batch.

    numerator   = sum over ordered same-label pairs (i != j) of ||x_i - x_j|| / N_i
    denominator = sum over ordered cross-label pairs of ||x_i - x_j|| / N_j

    where N_i is the number of batch samples sharing x_i's label, x_i
    included. A batch holding a single label is skipped: value 0 and zero
    gradient.
    """
    X, labels = _check_batch(X, labels)
    n = X.shape[0]
    classes, inverse, class_sizes = np.unique(labels, return_inverse=True, return_counts=True)
    if len(classes) < 2:
        return LossResult(0.0, np.zeros_like(X), skipped=True)

    sizes = class_sizes[inverse].astype(np.float64)
    same = inverse[:, None] == inverse[None, :]
    np.fill_diagonal(same, False)
    cross = inverse[:, None] != inverse[None, :]
    W_intra = same / sizes[:, None]
    W_inter = cross / sizes[None, :]

    D = pairwise_distances(X)
    num, g_num = _weighted_distance_sum(X, D, W_intra)
    den, g_den = _weighted_distance_sum(X, D, W_inter)
    if den == 0.0:
        raise CollapsedFeaturesError(
            f"all cross-class distances are zero in a batch of {n} with {len(classes)} labels"
        )
    value = num / den
    grad = (g_num - value * g_den) / den
    return LossResult(value, grad)


def ec_stfl_grad_check(X, labels, epsilon: float = 1e-5) -> float:
    """Max entrywise relative error of the analytic EC-STFL gradient.

    The reference is a central difference of the loss value evaluated in
    extended precision, so cancellation in ``f(x+h) - f(x-h)`` stays far
    below the tolerance. The step for entry x is ``epsilon * max(1, |x|)``,
    which makes the check invariant to rescaling the batch.
    """
    if not 1e-7 <= epsilon <= 1e-4:
        raise ValueError(f"epsilon must lie in [1e-7, 1e-4], got {epsilon}")
    X, labels = _check_batch(X, labels)
    res = ec_stfl_loss(X, labels)
    if res.skipped:
        raise ValueError("gradient check needs a batch with at least two labels")
    return max_relative_error(res.grad, ec_stfl_numeric_grad(X, labels, epsilon))


def ec_stfl_numeric_grad(X, labels, epsilon: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of the EC-STFL value in long double."""
    X = np.array(X, dtype=np.longdouble)
    labels = np.asarray(labels)
    _, inverse, class_sizes = np.unique(labels, return_inverse=True, return_counts=True)
    sizes = class_sizes[inverse].astype(np.longdouble)
    same = inverse[:, None] == inverse[None, :]
    W_intra = np.where(same, 1 / sizes[:, None], 0)
    W_inter = np.where(same, 0, 1 / sizes[None, :])
    D = pairwise_distances(X)

    def value_with_row(i, row):
        # perturbing x_i only changes row and column i of the distance matrix
        Dp = D.copy()
        Dp[i, :] = Dp[:, i] = np.sqrt(((X - row) ** 2).sum(axis=1))
        Dp[i, i] = 0
        return (W_intra * Dp).sum() / (W_inter * Dp).sum()

    grad = np.zeros(X.shape)
    for i, c in np.ndindex(X.shape):
        h = epsilon * max(1.0, abs(float(X[i, c])))
        row = X[i].copy()
        row[c] = X[i, c] + h
        hi = value_with_row(i, row)
        row[c] = X[i, c] - h
        lo = value_with_row(i, row)
        grad[i, c] = float((hi - lo) / (2 * h))
    return grad


def finite_difference(f, X, epsilon):
    """Central-difference gradient of scalar ``f`` at matrix ``X``."""
    X = np.array(X, dtype=np.float64)
    grad = np.zeros_like(X)
    for idx in np.ndindex(X.shape):
        orig = X[idx]
        X[idx] = orig + epsilon
        hi = f(X)
        X[idx] = orig - epsilon
        lo = f(X)
        X[idx] = orig
        grad[idx] = (hi - lo) / (2.0 * epsilon)
    return grad


def max_relative_error(analytic, numeric, floor_ratio: float = 1e-8) -> float:
    """max |a - f| / max(|a|, |f|); the floor only guards entries that are ~0 on both sides."""
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    scale = max(np.abs(analytic).max(), np.abs(numeric).max())
    if scale == 0.0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor_ratio * scale)
    return float((np.abs(analytic - numeric) / denom).max())


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_xent(logits, labels) -> LossResult:
    """Mean negative log-softmax of the true class; gradient w.r.t. logits."""
    logits, labels = _check_batch(logits, labels)
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    value = float((log_norm - z[rows, labels]).mean())
    grad = np.exp(z - log_norm[:, None])
    grad[rows, labels] -= 1.0
    return LossResult(value, grad / n)


def center_loss(X, labels, centers: ClassCenters, update: bool = True) -> LossResult:
    """(1/2n) sum ||x_i - c_{y_i}||^2, then move centers toward the batch.

    The value and gradient use the centers as they were on entry. With
    ``update`` the centers of classes present in the batch move by
    ``update_rate * sum_i (x_i - c_j) / (1 + n_j)``.
    """
    X, labels = _check_batch(X, labels)
    n = X.shape[0]
    if X.shape[1] != centers.centers.shape[1]:
        raise ValueError(
            f"feature dim {X.shape[1]} does not match centers dim {centers.centers.shape[1]}"
        )
    diff = X - centers.centers[labels]
    value = float(0.5 * (diff * diff).sum() / n)
    grad = diff / n
    if update:
        n_classes = centers.centers.shape[0]
        delta = np.zeros_like(centers.centers)
        np.add.at(delta, labels, diff)
        counts = np.bincount(labels, minlength=n_classes).astype(np.float64)
        centers.centers = centers.centers + centers.update_rate * delta / (1.0 + counts)[:, None]
    return LossResult(value, grad)


def joint_loss(X, logits, labels, lam: float = 10.0) -> JointLossResult:
    """Softmax loss plus ``lam`` times EC-STFL.

    The softmax term yields the logits gradient; EC-STFL yields a gradient
    on the features only. On a skipped batch the result reduces exactly to
    the softmax term.
    """
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    ce = softmax_xent(logits, labels)
    X = np.asarray(X, dtype=np.float64)
    if lam == 0:
        return JointLossResult(ce.value, ce.value, 0.0, ce.grad, np.zeros_like(X))
    ec = ec_stfl_loss(X, labels)
    if ec.skipped:
        return JointLossResult(ce.value, ce.value, ec.value, ce.grad, np.zeros_like(X), True)
    return JointLossResult(
        ce.value + lam * ec.value, ce.value, ec.value, ce.grad, lam * ec.grad
    )
