"""Training loss and evaluation metrics.

The composite training loss is binary cross entropy minus the log of a
modified Dice score, plus an L2 penalty on the differentiable weights.  The
Dice score is derived from a smoothed per-pixel intersection-over-union
ratio averaged over pixels; the same formula applied to hard masks doubles
as the evaluation metric.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ops import ContractViolation

DEFAULT_EPS = 1e-6
DEFAULT_CLIP = 1e-7
DEFAULT_L2 = 5e-4


@dataclass
class LossBreakdown:
    """Components of the composite loss: total = h - log(dice) + lam * l2."""

    h: float
    iou: float
    dice: float
    l2: float
    total: float
    eps: float = DEFAULT_EPS
    lam: float = DEFAULT_L2


@dataclass
class EvalReport:
    """Per-(task, split) IoU scores with mean and normal-approximation CI."""

    per_task_scores: list  # (task_id, split_id, iou)
    mean: float
    ci95_halfwidth: float
    n: int


def bce(y, yhat, clip=DEFAULT_CLIP):
    """Mean binary cross entropy; probabilities are clipped away from 0/1."""
    p = np.clip(yhat, clip, 1.0 - clip)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


def bce_grad(y, yhat, clip=DEFAULT_CLIP):
    """d bce / d yhat; zero where the clip is active."""
    p = np.clip(yhat, clip, 1.0 - clip)
    g = -(y / p - (1.0 - y) / (1.0 - p)) / y.size
    return np.where((yhat > clip) & (yhat < 1.0 - clip), g, 0.0)


def soft_iou(y, yhat, eps=DEFAULT_EPS):
    """Smoothed per-pixel intersection-over-union ratio, averaged over pixels:
    mean of (y*yhat + eps) / (y + yhat - y*yhat + eps)."""
    inter = y * yhat
    return float(np.mean((inter + eps) / (y + yhat - inter + eps)))


def soft_iou_grad(y, yhat, eps=DEFAULT_EPS):
    """d soft_iou / d yhat."""
    inter = y * yhat
    denom = y + yhat - inter + eps
    num = y * denom - (inter + eps) * (1.0 - y)
    return num / (denom * denom) / y.size


def dice_from_iou(iou):
    """Modified Dice score 2*iou / (iou + 1)."""
    if iou <= 0.0:
        raise ContractViolation(f"iou must be positive, got {iou}")
    return 2.0 * iou / (iou + 1.0)


def l2_norm_sq(params):
    """Squared L2 norm over all differentiable parameters (running stats
    carry no gradient and are excluded)."""
    return float(sum(np.sum(v * v) for _, v in params.param_items()))


def composite_loss(y, yhat, params=None, lam=DEFAULT_L2, eps=DEFAULT_EPS,
                   clip=DEFAULT_CLIP):
    """Composite loss with its gradients.

    Returns (breakdown, grad_yhat, grad_params) where grad_params holds the
    direct L2 contribution 2*lam*theta per parameter (empty when ``params``
    is None or lam == 0); the data terms reach the parameters only through
    ``grad_yhat``.
    """
    h = bce(y, yhat, clip=clip)
    iou = soft_iou(y, yhat, eps=eps)
    dice = dice_from_iou(iou)
    l2 = l2_norm_sq(params) if params is not None else 0.0
    total = h - np.log(dice) + lam * l2

    # d(-log dice)/d iou = -1 / (iou * (iou + 1))
    grad_yhat = bce_grad(y, yhat, clip=clip) \
        - soft_iou_grad(y, yhat, eps=eps) / (iou * (iou + 1.0))
    grad_params = {}
    if params is not None and lam != 0.0:
        grad_params = {name: 2.0 * lam * v for name, v in params.param_items()}
    breakdown = LossBreakdown(h=h, iou=iou, dice=dice, l2=l2,
                              total=float(total), eps=eps, lam=lam)
    return breakdown, grad_yhat, grad_params


def cross_entropy(onehot, probs, clip=DEFAULT_CLIP):
    """Mean multi-class cross entropy over pixels; probs (N, C, H, W)."""
    p = np.clip(probs, clip, 1.0)
    n_pix = probs.shape[0] * probs.shape[2] * probs.shape[3]
    return float(-np.sum(onehot * np.log(p)) / n_pix)


def cross_entropy_grad(onehot, probs, clip=DEFAULT_CLIP):
    """d cross_entropy / d probs."""
    p = np.clip(probs, clip, 1.0)
    n_pix = probs.shape[0] * probs.shape[2] * probs.shape[3]
    g = -onehot / p / n_pix
    return np.where(probs > clip, g, 0.0)


def mean_iou_ci(scores):
    """Mean and 95% CI half-width (1.96 * s / sqrt(n), sample stddev)."""
    scores = np.asarray(scores, dtype=float)
    if scores.size < 2:
        raise ContractViolation("confidence interval needs n >= 2 scores")
    mean = float(scores.mean())
    half = float(1.96 * scores.std(ddof=1) / np.sqrt(scores.size))
    return mean, half


def make_eval_report(rows):
    """Build an EvalReport from (task_id, split_id, iou) rows."""
    scores = [iou for _, _, iou in rows]
    mean, half = mean_iou_ci(scores)
    return EvalReport(per_task_scores=list(rows), mean=mean,
                      ci95_halfwidth=half, n=len(rows))
