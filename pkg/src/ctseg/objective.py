"""Training objectives and evaluation metrics.

Implements the smoothed Tanimoto loss per class, categorical
cross-entropy, their weighted combination (defaults 0.6 / 0.4), analytic
gradients with respect to the predicted probabilities, the Dice overlap
score, mean/std aggregation, and a bias-corrected ADAM update.

Loss functions operate on class-major float arrays: pred and one-hot
truth of shape (num_classes, ...). All arithmetic is done in double
precision regardless of the storage precision of the inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyInputError, ShapeError

DEFAULT_ALPHA = 0.6
DEFAULT_BETA = 0.4
DEFAULT_SMOOTH = 1e-5
DEFAULT_PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class LossConfig:
    alpha: float = DEFAULT_ALPHA
    beta: float = DEFAULT_BETA
    smooth: float = DEFAULT_SMOOTH
    prob_floor: float = DEFAULT_PROB_FLOOR

    def __post_init__(self):
        if not self.alpha + self.beta > 0:
            raise ValueError("alpha + beta must be positive")
        if not self.smooth > 0:
            raise ValueError("smooth must be positive")
        if not (0.0 < self.prob_floor <= 1e-3):
            raise ValueError("prob_floor must lie in (0, 1e-3]")


def _as_class_major(pred, truth):
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    if p.shape != t.shape or p.ndim < 1:
        raise ShapeError(f"pred shape {p.shape} != truth shape {t.shape}")
    return p.reshape(p.shape[0], -1), t.reshape(t.shape[0], -1)


def tanimoto_loss(pred, truth, smooth=DEFAULT_SMOOTH):
    """Per-class smoothed Tanimoto losses and their unweighted mean.

    For class c with prediction vector p and one-hot truth y:
        L_c = 1 - (<p, y> + smooth) / (|p|^2 + |y|^2 - <p, y> + smooth)
    """
    p, t = _as_class_major(pred, truth)
    inter = np.einsum("cn,cn->c", p, t)
    denom = np.einsum("cn,cn->c", p, p) + np.einsum("cn,cn->c", t, t) - inter
    per_class = 1.0 - (inter + smooth) / (denom + smooth)
    return per_class, float(per_class.mean())


def tanimoto_grad(pred, truth, smooth=DEFAULT_SMOOTH):
    """Analytic gradient of the class-mean Tanimoto loss w.r.t. pred."""
    p, t = _as_class_major(pred, truth)
    n_classes = p.shape[0]
    inter = np.einsum("cn,cn->c", p, t)
    denom = np.einsum("cn,cn->c", p, p) + np.einsum("cn,cn->c", t, t) - inter
    num = inter + smooth
    den = denom + smooth
    # quotient rule on N/D with dN/dp_i = y_i and dD/dp_i = 2 p_i - y_i
    grad = -(t * den[:, None] - num[:, None] * (2.0 * p - t)) / (den ** 2)[:, None]
    grad /= n_classes
    return grad.reshape(np.asarray(pred).shape)


def cross_entropy(pred, truth, prob_floor=DEFAULT_PROB_FLOOR):
    """Mean per-voxel categorical cross-entropy and its gradient.

    Probabilities are clamped at prob_floor inside the logarithm only;
    the gradient is zero where the clamp is active.
    """
    p, t = _as_class_major(pred, truth)
    n_voxels = p.shape[1]
    clamped = np.maximum(p, prob_floor)
    loss = float(-(t * np.log(clamped)).sum() / n_voxels)
    grad = np.where(p >= prob_floor, -t / clamped, 0.0) / n_voxels
    return loss, grad.reshape(np.asarray(pred).shape)


def combined_loss(pred, truth, cfg: LossConfig = LossConfig()):
    """alpha * mean Tanimoto loss + beta * cross-entropy, with gradient."""
    _, tan = tanimoto_loss(pred, truth, cfg.smooth)
    ce, ce_grad = cross_entropy(pred, truth, cfg.prob_floor)
    loss = cfg.alpha * tan + cfg.beta * ce
    grad = cfg.alpha * tanimoto_grad(pred, truth, cfg.smooth) + cfg.beta * ce_grad
    return loss, grad


def _mask_pair(pred_labels, truth_labels):
    a = np.asarray(getattr(pred_labels, "labels", pred_labels))
    b = np.asarray(getattr(truth_labels, "labels", truth_labels))
    if a.shape != b.shape:
        raise ShapeError(f"label shapes differ: {a.shape} vs {b.shape}")
    return a, b


def _dice_from_masks(pred_mask, truth_mask, empty_value):
    inter = int(np.logical_and(pred_mask, truth_mask).sum())
    size = int(pred_mask.sum()) + int(truth_mask.sum())
    if size == 0:
        return float(empty_value)
    return 2.0 * inter / size


def dice_score(pred_labels, truth_labels, class_id, empty_value=1.0):
    """Dice overlap 2|A∩B| / (|A|+|B|) on the binary masks of one class.

    Both masks empty defaults to 1 (a correctly predicted absent class);
    pass empty_value=float('nan') to exclude such volumes from
    aggregation instead.
    """
    a, b = _mask_pair(pred_labels, truth_labels)
    return _dice_from_masks(a == class_id, b == class_id, empty_value)


def pooled_foreground_dice(pred_labels, truth_labels, empty_value=1.0):
    """Binary Dice of all foreground classes pooled (label > 0)."""
    a, b = _mask_pair(pred_labels, truth_labels)
    return _dice_from_masks(a > 0, b > 0, empty_value)


def mean_foreground_dice(pred_labels, truth_labels, num_classes, empty_value=1.0):
    """Unweighted mean of per-class Dice over foreground classes."""
    return float(np.mean([
        dice_score(pred_labels, truth_labels, c, empty_value)
        for c in range(1, num_classes)
    ]))


def aggregate(scores):
    """Arithmetic mean and population standard deviation."""
    vals = np.asarray(list(scores), dtype=np.float64)
    if vals.size == 0:
        raise EmptyInputError("aggregate of empty score list")
    return float(vals.mean()), float(vals.std())


@dataclass(frozen=True)
class AdamState:
    step: int
    m: np.ndarray
    v: np.ndarray
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, n_params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls(
            step=0,
            m=np.zeros(n_params, dtype=np.float64),
            v=np.zeros(n_params, dtype=np.float64),
            lr=lr, beta1=beta1, beta2=beta2, eps=eps,
        )


def adam_step(params, grads, state: AdamState):
    """One bias-corrected ADAM update; returns (new params, new state)."""
    p = np.asarray(params, dtype=np.float64)
    g = np.asarray(grads, dtype=np.float64)
    if p.shape != g.shape or p.shape != state.m.shape:
        raise ShapeError(
            f"parameter/gradient/state shapes differ: "
            f"{p.shape}, {g.shape}, {state.m.shape}"
        )
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new_p = p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    new_state = AdamState(
        step=t, m=m, v=v,
        lr=state.lr, beta1=state.beta1, beta2=state.beta2, eps=state.eps,
    )
    return new_p, new_state
