"""Monte-Carlo prediction, pixel-level calibration and gradient saliency.

Confidence convention: a pixel predicted with foreground probability ``p`` is
assigned class 1 iff ``p > 0.5`` and its confidence is ``max(p, 1 - p)``, so
background pixels count as confident predictions of class 0. The alternative
``confidence="foreground"`` bins the raw ``p`` and reports the foreground
frequency per bin instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .segnet import forward_stochastic
from .tensor import Tensor
from .variational import ForwardContext

THRESHOLD = 0.5


@dataclass
class McConfig:
    num_samples: int = 50
    threshold: float = THRESHOLD
    seed: int = 0

    def __post_init__(self):
        if self.num_samples < 1:
            raise ValueError(f"num_samples must be >= 1, got {self.num_samples}")


@dataclass
class ReliabilityBin:
    lo: float
    hi: float
    count: int
    mean_confidence: float
    mean_accuracy: float


def _is_stochastic(model) -> bool:
    return bool(getattr(model, "stochastic_layers", None))


def binarize(probs, threshold: float = THRESHOLD) -> np.ndarray:
    return (np.asarray(probs) > threshold).astype(np.float64)


def mc_predict(model, image, cfg: McConfig, rng=None):
    """Average ``T`` stochastic forward passes.

    Returns ``(mean_probs, uncertainty, pred_mask)`` as arrays shaped like the
    model output; ``uncertainty`` is the per-pixel population standard
    deviation of the sampled probabilities.
    """
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    x = T.as_tensor(image).data
    if x.ndim == 3:
        x = x[None]
    if not _is_stochastic(model):
        probs, _ = forward_stochastic(model, x, rng)
        return probs.data, np.zeros_like(probs.data), binarize(probs.data, cfg.threshold)
    samples = []
    for _ in range(cfg.num_samples):
        probs, _ = forward_stochastic(model, x, rng)
        samples.append(probs.data)
    stack = np.stack(samples)
    mean = stack.mean(axis=0)
    std = np.sqrt(((stack - mean) ** 2).mean(axis=0))
    return mean, std, binarize(mean, cfg.threshold)


def _confidence_and_correct(probs, mask, confidence):
    p = np.asarray(probs, dtype=np.float64).ravel()
    y = np.asarray(mask, dtype=np.float64).ravel()
    if p.size == 0:
        raise ValueError("ece_image: empty image")
    if p.shape != y.shape:
        raise T.ShapeError(f"probs size {p.size} != mask size {y.size}")
    if confidence == "max":
        pred = p > THRESHOLD
        return np.where(pred, p, 1.0 - p), (pred == (y > 0.5)).astype(np.float64)
    if confidence == "foreground":
        return p, (y > 0.5).astype(np.float64)
    raise ValueError(f"confidence must be 'max' or 'foreground', got {confidence!r}")


def bin_edges(num_bins: int) -> np.ndarray:
    return np.arange(num_bins + 1) / num_bins


def ece_image(mean_probs, mask, num_bins: int = 15, confidence: str = "max"):
    """Pixel-weighted ``|accuracy - confidence|`` over equal-width bins.

    Bins are ``[lo, hi)`` except the last, which also includes 1.0.
    """
    if num_bins < 1:
        raise ValueError(f"num_bins must be >= 1, got {num_bins}")
    conf, correct = _confidence_and_correct(mean_probs, mask, confidence)
    edges = bin_edges(num_bins)
    idx = np.clip(np.searchsorted(edges, conf, side="right") - 1, 0, num_bins - 1)
    counts = np.bincount(idx, minlength=num_bins)
    conf_sum = np.bincount(idx, weights=conf, minlength=num_bins)
    acc_sum = np.bincount(idx, weights=correct, minlength=num_bins)
    n = conf.size
    bins = []
    total = 0.0
    for m in range(num_bins):
        c = int(counts[m])
        if c:
            mc, ma = conf_sum[m] / c, acc_sum[m] / c
            total += c * abs(ma - mc)
        else:
            mc = ma = math.nan
        bins.append(ReliabilityBin(float(edges[m]), float(edges[m + 1]), c, float(mc), float(ma)))
    return total / n, bins


def ece_dataset(per_image_eces: Sequence[float]) -> float:
    if len(per_image_eces) == 0:
        raise ValueError("ece_dataset: no images")
    return float(sum(per_image_eces) / len(per_image_eces))


def reliability_table(bins: Sequence[ReliabilityBin]) -> list:
    """Rows ``(bin_lo, bin_hi, count, conf, acc, gap)``; empty bins carry NaN."""
    rows = []
    for b in bins:
        gap = b.mean_accuracy - b.mean_confidence if b.count else math.nan
        rows.append((b.lo, b.hi, b.count, b.mean_confidence, b.mean_accuracy, gap))
    return rows


def merge_bins(per_image_bins: Sequence[Sequence[ReliabilityBin]]) -> list:
    """Pool bins from several images into dataset-level bins (count-weighted)."""
    merged = []
    for group in zip(*per_image_bins):
        count = sum(b.count for b in group)
        if count:
            conf = sum(b.count * b.mean_confidence for b in group if b.count) / count
            acc = sum(b.count * b.mean_accuracy for b in group if b.count) / count
        else:
            conf = acc = math.nan
        merged.append(ReliabilityBin(group[0].lo, group[0].hi, count, conf, acc))
    return merged


def _fmt(v) -> str:
    if isinstance(v, float) and math.isnan(v):
        return "n/a"
    return repr(v)


def write_reliability_csv(path, rows):
    with open(path, "w", newline="") as fh:
        fh.write("bin_lo,bin_hi,count,conf,acc,gap\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def reliability_svg(rows, ece: float | None = None, size: int = 320) -> str:
    """Bar chart of per-bin accuracy with the identity diagonal and gap overlay."""
    pad = 40
    plot = size - 2 * pad

    def sx(v):
        return pad + v * plot

    def sy(v):
        return size - pad - v * plot

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        f'<rect x="0" y="0" width="{size}" height="{size}" fill="white"/>',
        f'<rect x="{pad}" y="{pad}" width="{plot}" height="{plot}" fill="none" stroke="black"/>',
    ]
    for lo, hi, count, conf, acc, gap in rows:
        if not count:
            continue
        w = sx(hi) - sx(lo)
        parts.append(f'<rect class="acc" x="{sx(lo):.2f}" y="{sy(acc):.2f}" width="{w:.2f}" '
                     f'height="{sy(0) - sy(acc):.2f}" fill="#3b6fb6" stroke="#1d3b66"/>')
        top, bottom = max(acc, conf), min(acc, conf)
        parts.append(f'<rect class="gap" x="{sx(lo):.2f}" y="{sy(top):.2f}" width="{w:.2f}" '
                     f'height="{sy(bottom) - sy(top):.2f}" fill="#e06666" fill-opacity="0.5" stroke="#a33"/>')
    parts.append(f'<line x1="{sx(0)}" y1="{sy(0)}" x2="{sx(1)}" y2="{sy(1)}" stroke="gray" stroke-dasharray="4 3"/>')
    parts.append(f'<text x="{size / 2}" y="{size - 8}" text-anchor="middle" font-size="12">confidence</text>')
    parts.append(f'<text x="12" y="{size / 2}" text-anchor="middle" font-size="12" '
                 f'transform="rotate(-90 12 {size / 2})">accuracy</text>')
    if ece is not None:
        parts.append(f'<text x="{sx(1) - 6}" y="{sy(0) - 8}" text-anchor="end" font-size="12">ECE = {ece:.4f}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# -------------------------------------------------------------------- saliency

def _model_fn(model, ctx_factory) -> Callable:
    if hasattr(model, "run"):
        return lambda x: model.run(x, ctx_factory())
    return model


def saliency_map(model, image, rng=None) -> np.ndarray:
    """``|d target / d input|`` reduced by max over channels.

    The target is the summed probability over pixels predicted as foreground
    (``p > 0.5``) in the same pass. ``model`` may be a :class:`SegModel` (mean
    weights, or one weight sample when ``rng`` is given) or any callable mapping
    an ``(N, C, H, W)`` tensor to probabilities.
    """
    if rng is None:
        fn = _model_fn(model, lambda: ForwardContext(mode="mean", collect_kl=False))
    else:
        fn = _model_fn(model, lambda: ForwardContext(mode="sample", rng=rng, collect_kl=False))
    data = T.as_tensor(image).data
    squeeze = data.ndim == 3
    if squeeze:
        data = data[None]
    x = Tensor(data.copy(), requires_grad=True)
    probs = fn(x)
    sel = (probs.data > THRESHOLD).astype(np.float64)
    target = T.tsum(probs * sel)
    T.backward(target)
    g = np.zeros_like(data) if x.grad is None else x.grad
    out = np.abs(g).max(axis=1)
    return out[0] if squeeze else out


def saliency_uncertainty(model, image, cfg: McConfig, rng=None) -> np.ndarray:
    """Per-pixel standard deviation of the saliency map over weight samples."""
    if not _is_stochastic(model):
        sal = saliency_map(model, image)
        return np.zeros_like(sal)
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    maps = np.stack([saliency_map(model, image, rng) for _ in range(cfg.num_samples)])
    mean = maps.mean(axis=0)
    return np.sqrt(((maps - mean) ** 2).mean(axis=0))
