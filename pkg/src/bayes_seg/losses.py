"""Segmentation losses (differentiable, on probabilities) and hard-mask metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

SMOOTH = 1.0
CLAMP = 1e-7


@dataclass(frozen=True)
class FocalParams:
    alpha: float = 0.25
    gamma: float = 2.0

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other):
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)


def _pair(probs, mask):
    probs = T.as_tensor(probs)
    mask = T.as_tensor(mask).detach()
    if probs.shape != mask.shape:
        raise T.ShapeError(f"probs shape {probs.shape} != mask shape {mask.shape}")
    return probs, mask


def jaccard_loss(probs, mask, smooth: float = SMOOTH) -> Tensor:
    p, y = _pair(probs, mask)
    inter = T.tsum(p * y)
    union = T.tsum(p + y - p * y)
    return 1.0 - (inter + smooth) / (union + smooth)


def dice_loss(probs, mask, smooth: float = SMOOTH) -> Tensor:
    p, y = _pair(probs, mask)
    inter = T.tsum(p * y)
    return 1.0 - (2.0 * inter + smooth) / (T.tsum(p) + T.tsum(y) + smooth)


def _log_terms(p):
    pc = T.clip(p, CLAMP, 1.0 - CLAMP)
    return pc, T.log(pc), T.log(1.0 - pc)


def bce_loss(probs, mask) -> Tensor:
    p, y = _pair(probs, mask)
    _, lp, lq = _log_terms(p)
    return -T.mean(y * lp + (1.0 - y) * lq)


def binary_focal_loss(probs, mask, params: FocalParams = FocalParams()) -> Tensor:
    p, y = _pair(probs, mask)
    pc, lp, lq = _log_terms(p)
    a, g = params.alpha, params.gamma
    pos = y * T.power(1.0 - pc, g) * lp
    negt = (1.0 - y) * T.power(pc, g) * lq
    return -a * T.mean(pos + negt)


def total_loss(probs, mask, params: FocalParams = FocalParams()) -> Tensor:
    return dice_loss(probs, mask) + 0.5 * binary_focal_loss(probs, mask, params)


def nll_loss(probs, mask) -> Tensor:
    """Summed Bernoulli negative log-likelihood (``n * bce_loss``)."""
    p, y = _pair(probs, mask)
    _, lp, lq = _log_terms(p)
    return -T.tsum(y * lp + (1.0 - y) * lq)


LOSSES = {
    "dice": dice_loss,
    "jaccard": jaccard_loss,
    "bce": bce_loss,
    "total": total_loss,
    "nll": nll_loss,
}


# --------------------------------------------------------------------- metrics

def _binary(a, name):
    a = np.asarray(a.data if isinstance(a, Tensor) else a)
    if not np.all((a == 0) | (a == 1)):
        raise ValueError(f"{name} must be binary (0/1)")
    return a.astype(bool)


def confusion_counts(pred_mask, mask) -> ConfusionCounts:
    yh, y = _binary(pred_mask, "pred_mask"), _binary(mask, "mask")
    if yh.shape != y.shape:
        raise T.ShapeError(f"pred_mask shape {yh.shape} != mask shape {y.shape}")
    return ConfusionCounts(
        tp=int(np.sum(yh & y)), fp=int(np.sum(yh & ~y)),
        fn=int(np.sum(~yh & y)), tn=int(np.sum(~yh & ~y)),
    )


def iou_metric(pred_mask, mask) -> float:
    """Intersection over union; 1.0 when both masks are empty."""
    yh, y = _binary(pred_mask, "pred_mask"), _binary(mask, "mask")
    union = int(np.sum(yh | y))
    if union == 0:
        return 1.0
    return int(np.sum(yh & y)) / union


def recall_from_counts(c: ConfusionCounts) -> float:
    return 1.0 if c.tp + c.fn == 0 else c.tp / (c.tp + c.fn)


def recall_metric(pred_mask, mask) -> float:
    return recall_from_counts(confusion_counts(pred_mask, mask))
