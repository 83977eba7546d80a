"""Distributed label augmentation and rotation/shift image augmentation."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage as ndi
from scipy.special import ndtr

from .core import ValidationError

LABEL_MAX = 300


@dataclass(frozen=True)
class DlaConfig:
    sigma: float = 0.9
    samples_per_image: int = 50
    label_max: int = LABEL_MAX

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValidationError("sigma must be > 0")
        if self.samples_per_image < 1:
            raise ValidationError("samples_per_image must be >= 1")


def label_distribution(mean: float, cfg: DlaConfig = DlaConfig()) -> np.ndarray:
    """Gaussian mass of each integer label cell [c - 1/2, c + 1/2], truncated
    to 0..label_max and renormalized."""
    if not 0 <= mean <= cfg.label_max:
        raise ValidationError(f"label {mean} outside [0, {cfg.label_max}]")
    labels = np.arange(cfg.label_max + 1, dtype=np.float64)
    # only cells within 12 sigma carry mass at double precision
    lo = max(0, int(np.floor(mean - 12 * cfg.sigma)))
    hi = min(cfg.label_max, int(np.ceil(mean + 12 * cfg.sigma)))
    cells = labels[lo : hi + 1]
    upper = ndtr((cells + 0.5 - mean) / cfg.sigma)
    lower = ndtr((cells - 0.5 - mean) / cfg.sigma)
    p = np.zeros_like(labels)
    p[lo : hi + 1] = upper - lower
    total = p.sum()
    if total <= 0:
        # sigma far below the cell width around a half-integer mean
        p[int(round(mean))] = 1.0
        total = 1.0
    p /= total
    # the mode absorbs the rounding residue: the exactly rounded sum is 1
    top = int(np.argmax(p))
    p[top] = 0.0
    p[top] = 1.0 - math.fsum(p)
    for _ in range(8):
        total = math.fsum(p)
        if total == 1.0:
            break
        p[top] = np.nextafter(p[top], -np.inf if total > 1.0 else np.inf)
    return p


def augment_labels(l_d: float, cfg: DlaConfig, rng: np.random.Generator) -> np.ndarray:
    p = label_distribution(l_d, cfg)
    return rng.choice(p.size, size=cfg.samples_per_image, p=p)


@dataclass(frozen=True)
class GeometricDraw:
    angle: float
    shift: tuple[int, int]


def draw_transform(shape: tuple[int, int], rng: np.random.Generator, max_shift_frac: float = 0.05) -> GeometricDraw:
    h, w = shape[-2:]
    angle = float(rng.uniform(0.0, 360.0))
    max_dy = int(np.floor(max_shift_frac * h))
    max_dx = int(np.floor(max_shift_frac * w))
    dy = int(rng.integers(-max_dy, max_dy + 1))
    dx = int(rng.integers(-max_dx, max_dx + 1))
    return GeometricDraw(angle, (dy, dx))


def _shift(img: np.ndarray, dy: int, dx: int, fill: float) -> np.ndarray:
    out = np.full_like(img, fill)
    h, w = img.shape[-2:]
    src_y = slice(max(0, -dy), min(h, h - dy))
    dst_y = slice(max(0, dy), min(h, h + dy))
    src_x = slice(max(0, -dx), min(w, w - dx))
    dst_x = slice(max(0, dx), min(w, w + dx))
    out[..., dst_y, dst_x] = img[..., src_y, src_x]
    return out


def apply_transform(img: np.ndarray, draw: GeometricDraw, order: int = 1, fill: float = 0.0) -> np.ndarray:
    """Rotate counter-clockwise about the centre, then shift.

    Works on (h, w) or (..., h, w) arrays; exact multiples of 90 degrees
    use lossless array rotation. ``order`` 0 keeps masks binary.
    """
    img = np.asarray(img)
    quarter = draw.angle / 90.0
    if abs(quarter - round(quarter)) < 1e-12:
        out = np.rot90(img, k=int(round(quarter)) % 4, axes=(-2, -1)).copy()
    else:
        out = ndi.rotate(
            img, draw.angle, axes=(-1, -2), reshape=False, order=order, mode="constant", cval=fill, prefilter=False
        )
        if order == 0 or img.dtype.kind in "iub":
            out = out.astype(img.dtype)
    dy, dx = draw.shift
    if dy or dx:
        out = _shift(out, dy, dx, fill)
    return out


def geometric_augment(img, rng: np.random.Generator, max_shift_frac: float = 0.05, order: int = 1, fill: float = 0.0):
    draw = draw_transform(np.shape(img), rng, max_shift_frac)
    return apply_transform(img, draw, order=order, fill=fill)


def geometric_augment_pair(img, mask, rng: np.random.Generator, max_shift_frac: float = 0.05, fill: float = 0.0):
    """Same random transform for an image (bilinear) and its mask (nearest)."""
    draw = draw_transform(np.shape(img), rng, max_shift_frac)
    return apply_transform(img, draw, order=1, fill=fill), apply_transform(mask, draw, order=0, fill=0)
