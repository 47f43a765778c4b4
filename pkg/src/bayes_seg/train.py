"""Training loop (negative ELBO with Adam and early stopping) and evaluation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .calibration import McConfig, ece_dataset, ece_image, mc_predict
from .data import augment, sample_rng, stack_batch
from .losses import LOSSES, ConfusionCounts, FocalParams, confusion_counts, iou_metric, recall_from_counts
from .segnet import SegModel, forward_mean, forward_stochastic

log = logging.getLogger(__name__)


class NumericError(ArithmeticError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 8
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_epochs: int = 50
    patience: int = 3
    kl_scale: float | None = None  # None -> 1 / N_train
    loss_kind: str = "nll"
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    grad_clip: float = 10.0
    augment: bool = True
    seed: int = 0

    def validate(self):
        if self.loss_kind not in LOSSES:
            raise ValueError(f"loss_kind must be one of {sorted(LOSSES)}, got {self.loss_kind!r}")
        if self.patience < 1 or self.batch_size < 1 or self.max_epochs < 0:
            raise ValueError("patience and batch_size must be >= 1, max_epochs >= 0")
        if self.kl_scale is not None and self.kl_scale < 0:
            raise ValueError("kl_scale must be non-negative")
        return self


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, clip_norm=None):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in self.params]
        if self.clip_norm:
            norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
            if norm > self.clip_norm:
                grads = [g * (self.clip_norm / norm) for g in grads]
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def data_loss(probs, masks, cfg: TrainConfig):
    """Batch data term; the summed NLL is averaged over images."""
    if cfg.loss_kind == "nll":
        return LOSSES["nll"](probs, masks) / probs.shape[0]
    if cfg.loss_kind == "total":
        return LOSSES["total"](probs, masks, FocalParams(cfg.focal_alpha, cfg.focal_gamma))
    return LOSSES[cfg.loss_kind](probs, masks)


def objective(model: SegModel, images, masks, cfg: TrainConfig, kl_scale: float, rng):
    """``data_loss + kl_scale * sum of layer KLs`` for one weight sample."""
    probs, kl = forward_stochastic(model, images, rng)
    dl = data_loss(probs, masks, cfg)
    return dl + kl_scale * kl, dl, kl


def _batches(items, size):
    for i in range(0, len(items), size):
        yield items[i:i + size]


def _snapshot(model):
    return {k: p.data.copy() for k, p in model.named_parameters().items()}


def _restore(model, snap):
    for k, p in model.named_parameters().items():
        p.data = snap[k].copy()


def _worst_norms(model, k=5):
    norms = {name: float(np.linalg.norm(p.data)) for name, p in model.named_parameters().items()}
    # NaN norms sort first
    return sorted(norms.items(), key=lambda kv: -kv[1] if math.isfinite(kv[1]) else -math.inf)[:k]


def validation_scores(model: SegModel, samples, cfg: TrainConfig):
    """Data loss and mean per-image IoU of the mean-weight network."""
    losses, weights, ious = [], [], []
    for chunk in _batches(samples, max(cfg.batch_size, 16)):
        x, y = stack_batch(chunk)
        probs = forward_mean(model, x)
        losses.append(data_loss(probs, y, cfg).item())
        weights.append(len(chunk))
        pred = (probs.data > 0.5).astype(np.float64)
        ious += [iou_metric(pred[i], y[i]) for i in range(len(chunk))]
    return float(np.average(losses, weights=weights)), float(np.mean(ious))


@dataclass
class History:
    rows: list = field(default_factory=list)
    best_epoch: int = -1

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write("epoch,train_loss,val_loss,val_iou\n")
            for r in self.rows:
                fh.write(f"{r['epoch']},{r['train_loss']!r},{r['val_loss']!r},{r['val_iou']!r}\n")


def train(model: SegModel, datasets, cfg: TrainConfig):
    """Minimize the negative ELBO; restores the best-validation parameters.

    ``datasets`` is ``(train_samples, val_samples)``. One weight sample is drawn
    per batch. Returns ``(model, History)``.
    """
    cfg.validate()
    train_set, val_set = datasets[0], datasets[1]
    if not train_set or not val_set:
        raise ValueError("train and validation splits must be non-empty")
    kl_scale = 1.0 / len(train_set) if cfg.kl_scale is None else cfg.kl_scale
    opt = Adam(model.parameters(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.grad_clip)
    hist = History()
    best = math.inf
    best_snap = _snapshot(model)
    stale = 0

    for epoch in range(cfg.max_epochs):
        order = np.random.default_rng([cfg.seed, epoch, 0]).permutation(len(train_set))
        noise = np.random.default_rng([cfg.seed, epoch, 1])
        total, count = 0.0, 0
        for b, idx in enumerate(_batches(order, cfg.batch_size)):
            chunk = [train_set[i] for i in idx]
            if cfg.augment:
                chunk = [augment(s, sample_rng(cfg.seed, epoch, s.id)) for s in chunk]
            x, y = stack_batch(chunk)
            try:
                loss, _, _ = objective(model, x, y, cfg, kl_scale, noise)
                value = loss.item()
            except T.DomainError as exc:
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {b} ({exc}); "
                                   f"largest parameter norms: {_worst_norms(model)}") from exc
            if not math.isfinite(value):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {b}; "
                                   f"largest parameter norms: {_worst_norms(model)}")
            opt.zero_grad()
            T.backward(loss)
            opt.step()
            total += value * len(idx)
            count += len(idx)

        val_loss, val_iou = validation_scores(model, val_set, cfg)
        hist.rows.append({"epoch": epoch, "train_loss": total / count, "val_loss": val_loss, "val_iou": val_iou})
        log.info("epoch %d train %.5f val %.5f iou %.4f", epoch, total / count, val_loss, val_iou)
        if val_loss < best:
            best, best_snap, stale = val_loss, _snapshot(model), 0
            hist.best_epoch = epoch
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    _restore(model, best_snap)
    return model, hist


# ------------------------------------------------------------------ evaluation

@dataclass
class EvalResult:
    metrics: dict
    per_image: list
    bins: list


def evaluate(model, samples, cfg: McConfig, num_bins: int = 15, batch_size: int = 16) -> EvalResult:
    """MC-mean masks per image; confusion counts summed, IoU and ECE averaged per image."""
    if not samples:
        raise ValueError("evaluate: empty split")
    rng = np.random.default_rng(cfg.seed)
    counts = ConfusionCounts(0, 0, 0, 0)
    ious, eces, per_image, bins = [], [], [], []
    for chunk in _batches(list(samples), batch_size):
        x, y = stack_batch(chunk)
        mean, std, pred = mc_predict(model, x, cfg, rng)
        for i, s in enumerate(chunk):
            c = confusion_counts(pred[i], y[i])
            e, b = ece_image(mean[i], y[i], num_bins)
            counts = counts + c
            ious.append(iou_metric(pred[i], y[i]))
            eces.append(e)
            bins.append(b)
            per_image.append({"id": s.id, "mean_probs": mean[i], "uncertainty": std[i], "mask": y[i]})
    metrics = {
        "iou": float(np.mean(ious)),
        "recall": recall_from_counts(counts),
        "false_positives": counts.fp,
        "false_negatives": counts.fn,
        "true_positives": counts.tp,
        "true_negatives": counts.tn,
        "ece": ece_dataset(eces),
        "num_images": len(per_image),
        "num_pixels": counts.total,
        "mc_samples": cfg.num_samples,
        "num_bins": num_bins,
    }
    return EvalResult(metrics, per_image, bins)
