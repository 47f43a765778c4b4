"""Datasets of (image, binary mask) pairs.

Folder layout: ``<root>/images/<id>.png|pgm|ppm`` and ``<root>/masks/<id>.png|pgm``
with matching basenames. Images are stored as ``(3, H, W)`` float64 arrays in
``[0, 1]``; masks as ``(1, H, W)`` arrays with values in ``{0, 1}``.
"""

from __future__ import annotations

import dataclasses
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

IMAGE_EXTS = (".png", ".pgm", ".ppm")
LUMA = np.array([0.299, 0.587, 0.114])


class DataError(Exception):
    pass


class MissingPairError(DataError):
    pass


class UnreadableImageError(DataError):
    pass


class EmptyImageError(DataError):
    pass


@dataclass
class Sample:
    image: np.ndarray
    mask: np.ndarray
    id: str
    split: str = "train"

    def __post_init__(self):
        if self.image.shape[1:] != self.mask.shape[1:]:
            raise ValueError(f"sample {self.id}: image {self.image.shape} and mask {self.mask.shape} differ spatially")


@dataclass
class SyntheticSpec:
    count: int = 200
    image_size: int = 64
    min_polyps: int = 1
    max_polyps: int = 3
    radius_min: float = 5.0
    radius_max: float = 14.0
    fg_min: float = 0.6
    fg_max: float = 0.9
    bg_min: float = 0.15
    bg_max: float = 0.45
    noise_sigma: float = 0.04
    seed: int = 0

    def validate(self):
        if self.count < 1 or self.image_size < 8:
            raise ValueError("count must be >= 1 and image_size >= 8")
        if not 1 <= self.min_polyps <= self.max_polyps:
            raise ValueError("need 1 <= min_polyps <= max_polyps")
        if not 0 < self.radius_min <= self.radius_max < self.image_size / 2:
            raise ValueError("radius range must satisfy 0 < radius_min <= radius_max < image_size / 2")
        return self


# ------------------------------------------------------------------ synthetic

def ellipse_mask(size, cx, cy, a, b) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    return ((xx - cx) ** 2 / a ** 2 + (yy - cy) ** 2 / b ** 2) <= 1.0


def _synth_one(spec: SyntheticSpec, index: int):
    rng = np.random.default_rng([spec.seed, index])
    size = spec.image_size
    tint = np.array([1.0, 0.75, 0.65]) + rng.uniform(-0.05, 0.05, 3)

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    theta = rng.uniform(0, 2 * np.pi)
    level = rng.uniform(spec.bg_min, spec.bg_max)
    bg = level + 0.1 * (xx * np.cos(theta) + yy * np.sin(theta) - 0.5)
    gray = bg.copy()

    mask = np.zeros((size, size), dtype=bool)
    ellipses = []
    for _ in range(int(rng.integers(spec.min_polyps, spec.max_polyps + 1))):
        a, b = rng.uniform(spec.radius_min, spec.radius_max, 2)
        cx = rng.uniform(a, size - 1 - a)
        cy = rng.uniform(b, size - 1 - b)
        inside = ellipse_mask(size, cx, cy, a, b)
        gray[inside] = rng.uniform(spec.fg_min, spec.fg_max)
        mask |= inside
        ellipses.append((float(cx), float(cy), float(a), float(b)))

    image = gray[None] * tint[:, None, None]
    image = image + rng.normal(0.0, spec.noise_sigma, image.shape)
    return np.clip(image, 0.0, 1.0), mask[None].astype(np.float64), ellipses


def generate_synthetic(spec: SyntheticSpec, with_geometry: bool = False):
    """Smooth-gradient backgrounds with 1-3 brighter filled ellipses.

    Each sample draws from its own stream seeded by ``(spec.seed, index)``.
    With ``with_geometry`` the ellipse parameters ``(cx, cy, a, b)`` of every
    sample are returned as a second list.
    """
    spec.validate()
    samples, geometry = [], []
    for i in range(spec.count):
        image, mask, ell = _synth_one(spec, i)
        samples.append(Sample(image, mask, f"synth_{i:04d}"))
        geometry.append(ell)
    return (samples, geometry) if with_geometry else samples


# -------------------------------------------------------------------- folders

def _index_dir(d: Path) -> dict:
    out = {}
    for p in sorted(d.iterdir()):
        if p.suffix.lower() in IMAGE_EXTS:
            out[p.stem] = p
    return out


def _open(path: Path, mode: str, size: int, resample) -> np.ndarray:
    if path.stat().st_size == 0:
        raise EmptyImageError(f"{path}: file is empty")
    try:
        with Image.open(path) as im:
            im.load()
            if im.width == 0 or im.height == 0:
                raise EmptyImageError(f"{path}: image has zero size")
            im = im.convert(mode)
            if size and im.size != (size, size):
                im = im.resize((size, size), resample)
            return np.asarray(im, dtype=np.float64)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise UnreadableImageError(f"{path}: cannot read image ({exc})") from exc


def load_image(path, target_size: int = 64) -> np.ndarray:
    """One RGB image as a ``(3, H, W)`` array in ``[0, 1]``."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"image not found: {path}")
    return (_open(path, "RGB", target_size, Image.BILINEAR) / 255.0).transpose(2, 0, 1).copy()


def load_folder(images_dir, masks_dir, target_size: int = 64) -> list:
    images_dir, masks_dir = Path(images_dir), Path(masks_dir)
    for d in (images_dir, masks_dir):
        if not d.is_dir():
            raise DataError(f"dataset not found: {d}")
    imgs, masks = _index_dir(images_dir), _index_dir(masks_dir)
    orphans = sorted(set(imgs) ^ set(masks))
    if orphans:
        where = "masks" if orphans[0] in imgs else "images"
        raise MissingPairError(f"no matching file in {where}/ for '{orphans[0]}'")
    samples = []
    for stem in sorted(imgs):
        img = _open(imgs[stem], "RGB", target_size, Image.BILINEAR) / 255.0
        msk = _open(masks[stem], "L", target_size, Image.NEAREST)
        samples.append(Sample(img.transpose(2, 0, 1).copy(), (msk > 127).astype(np.float64)[None], stem))
    return samples


def save_folder(samples, root) -> list:
    """Write samples as 8-bit PNGs; returns the written paths."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    written = []
    for s in samples:
        img = np.round(np.clip(s.image, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
        msk = (s.mask[0] > 0.5).astype(np.uint8) * 255
        ip, mp = root / "images" / f"{s.id}.png", root / "masks" / f"{s.id}.png"
        Image.fromarray(img, "RGB").save(ip)
        Image.fromarray(msk, "L").save(mp)
        written += [ip, mp]
    return written


# ---------------------------------------------------------------------- split

def split_dataset(samples, seed: int = 0):
    """70/20/10 split after a seeded shuffle; sizes use integer floors."""
    n = len(samples)
    if n < 10:
        raise DataError(f"need at least 10 samples to split, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    n_train, n_val = n * 7 // 10, n * 2 // 10
    parts = (order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:])
    return tuple(
        [dataclasses.replace(samples[i], split=tag) for i in idx]
        for tag, idx in zip(("train", "val", "test"), parts)
    )


# --------------------------------------------------------------- augmentation

@dataclass(frozen=True)
class AugmentParams:
    brightness: float = 0.0
    saturation: float = 1.0
    contrast: float = 1.0
    hflip: bool = False
    vflip: bool = False


def sample_rng(seed: int, epoch: int, sample_id: str) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, zlib.crc32(sample_id.encode("utf-8"))])


def draw_augment_params(rng) -> AugmentParams:
    return AugmentParams(
        brightness=float(rng.uniform(-0.2, 0.2)),
        saturation=float(rng.uniform(0.8, 1.2)),
        contrast=float(rng.uniform(0.8, 1.2)),
        hflip=bool(rng.random() < 0.5),
        vflip=bool(rng.random() < 0.5),
    )


def apply_augment(sample: Sample, p: AugmentParams) -> Sample:
    img = sample.image
    if p.brightness != 0.0:
        img = img + p.brightness
    if p.saturation != 1.0:
        gray = np.tensordot(LUMA, img, axes=1)[None]
        img = gray + p.saturation * (img - gray)
    if p.contrast != 1.0:
        m = np.tensordot(LUMA, img, axes=1).mean()
        img = m + p.contrast * (img - m)
    mask = sample.mask
    if p.hflip:
        img, mask = img[:, :, ::-1], mask[:, :, ::-1]
    if p.vflip:
        img, mask = img[:, ::-1, :], mask[:, ::-1, :]
    img = np.clip(img, 0.0, 1.0)
    return dataclasses.replace(sample, image=np.ascontiguousarray(img), mask=np.ascontiguousarray(mask))


def augment(sample: Sample, rng) -> Sample:
    """Colour jitter, random horizontal/vertical flips, clamp to [0, 1]."""
    return apply_augment(sample, draw_augment_params(rng))


def stack_batch(samples):
    return np.stack([s.image for s in samples]), np.stack([s.mask for s in samples])
