"""Luminance-adaptive multi-thresholding of the DAB channel.

Pixels are grouped into K equal-width luminance bins. In each bin a
two-component 1-D Gaussian mixture is fit to the DAB concentrations by EM,
and the MAP decision boundary between the components becomes that bin's
threshold. Positive pixels are then mapped to a continuous stain intensity
description: luminance for positives, ``510 - luminance`` for negatives.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .core import (
    RAW_SCALE,
    IntensityImage,
    LuminanceImage,
    MaskImage,
    StainClassMap,
    ValidationError,
    ensure_same_shape,
)

log = logging.getLogger(__name__)

MIN_BIN_PIXELS = 32


@dataclass(frozen=True)
class LamtParams:
    k_bins: int = 4
    seed: int = 0
    max_iter: int = 50
    tol: float = 1e-6
    # pixels brighter than this carry no stain evidence and are not fit
    exclude_above: float = 250.0
    # bimodality gate (Ashman's D) below which a bin counts as one population
    min_separation: float = 3.0
    # a genuine negative component carries little DAB relative to the positive
    max_mean_ratio: float = 0.5
    # DAB concentrations at or below this are never called positive
    min_threshold: float = 0.1

    def __post_init__(self):
        if self.k_bins < 1:
            raise ValidationError("k_bins must be >= 1")


@dataclass(frozen=True)
class GaussianComponent:
    mean: float
    var: float
    prior: float

    def log_density(self, x):
        return (
            np.log(self.prior)
            - 0.5 * np.log(2 * np.pi * self.var)
            - 0.5 * (np.asarray(x) - self.mean) ** 2 / self.var
        )


@dataclass(frozen=True)
class BinFit:
    """One bin's classifier. ``negative``/``positive`` are None for fallbacks."""

    threshold: float
    negative: GaussianComponent | None = None
    positive: GaussianComponent | None = None
    n_pixels: int = 0
    fallback: str | None = None

    @property
    def is_fallback(self) -> bool:
        return self.fallback is not None


@dataclass(frozen=True)
class BinClassifier:
    binning: np.ndarray
    bins: tuple[BinFit, ...] = field(default_factory=tuple)

    @property
    def thresholds(self) -> np.ndarray:
        return np.array([b.threshold for b in self.bins])


def bin_boundaries(k_bins: int) -> np.ndarray:
    return np.linspace(0.0, 256.0, k_bins + 1)


def partition_luminance(lum: LuminanceImage | np.ndarray, k_bins: int) -> np.ndarray:
    if k_bins < 1:
        raise ValidationError("k_bins must be >= 1")
    values = lum.data if isinstance(lum, LuminanceImage) else np.asarray(lum, dtype=np.float64)
    idx = np.floor(values * k_bins / 256.0).astype(np.int64)
    return np.clip(idx, 0, k_bins - 1)


def _init_means(x: np.ndarray, rng: np.random.Generator) -> tuple[float, float]:
    # k-means++ style: second seed drawn proportional to squared distance
    first = x[rng.integers(x.size)]
    d2 = (x - first) ** 2
    total = d2.sum()
    if total <= 0:
        return float(first), float(first)
    second = x[rng.choice(x.size, p=d2 / total)]
    return float(min(first, second)), float(max(first, second))


def fit_mixture(x, rng: np.random.Generator, max_iter: int = 50, tol: float = 1e-6):
    """Two-component 1-D Gaussian mixture by EM; components ordered by mean."""
    x = np.asarray(x, dtype=np.float64).ravel()
    lo, hi = _init_means(x, rng)
    spread = x.var()
    var_floor = max(spread * 1e-6, 1e-10)
    mu = np.array([lo, hi])
    var = np.array([spread, spread]) + var_floor
    pi = np.array([0.5, 0.5])
    prev = -np.inf
    for _ in range(max_iter):
        logp = np.log(pi) - 0.5 * np.log(2 * np.pi * var) - 0.5 * (x[:, None] - mu) ** 2 / var
        top = logp.max(axis=1, keepdims=True)
        ll_rows = top[:, 0] + np.log(np.exp(logp - top).sum(axis=1))
        resp = np.exp(logp - ll_rows[:, None])
        nk = resp.sum(axis=0) + 1e-12
        pi = nk / x.size
        mu = (resp * x[:, None]).sum(axis=0) / nk
        var = (resp * (x[:, None] - mu) ** 2).sum(axis=0) / nk + var_floor
        ll = ll_rows.mean()
        if abs(ll - prev) < tol:
            break
        prev = ll
    order = np.argsort(mu)
    return tuple(GaussianComponent(float(mu[i]), float(var[i]), float(pi[i])) for i in order)


def equal_posterior_point(neg: GaussianComponent, pos: GaussianComponent) -> float:
    """Point between the two means where the weighted densities cross."""
    a, b = neg.mean, pos.mean

    def diff(t):
        return float(pos.log_density(t) - neg.log_density(t))

    fa, fb = diff(a), diff(b)
    if fa >= 0 or fb <= 0:
        # one component dominates across the whole gap
        w = pos.prior
        return (1 - w) * a + w * b if fa < 0 else a
    for _ in range(200):
        mid = 0.5 * (a + b)
        if diff(mid) > 0:
            b = mid
        else:
            a = mid
        if b - a < 1e-12:
            break
    return 0.5 * (a + b)


def ashman_d(neg: GaussianComponent, pos: GaussianComponent) -> float:
    return float(np.sqrt(2.0) * abs(pos.mean - neg.mean) / np.sqrt(neg.var + pos.var))


def fit_bin_classifier(dab, params: LamtParams = LamtParams(), rng=None) -> BinFit:
    """Fit one bin. Returns a fallback-marked entry when the bin is too sparse,
    constant or unimodal; the caller resolves those thresholds."""
    x = np.asarray(dab, dtype=np.float64).ravel()
    if x.size < MIN_BIN_PIXELS:
        return BinFit(threshold=np.nan, n_pixels=x.size, fallback="sparse")
    if np.ptp(x) <= 1e-12:
        return BinFit(threshold=np.nan, n_pixels=x.size, fallback="degenerate")
    rng = np.random.default_rng(params.seed) if rng is None else rng
    neg, pos = fit_mixture(x, rng, params.max_iter, params.tol)
    if (
        ashman_d(neg, pos) < params.min_separation
        or min(neg.prior, pos.prior) < 1e-3
        or neg.mean > params.max_mean_ratio * pos.mean
    ):
        return BinFit(threshold=np.nan, negative=neg, positive=pos, n_pixels=x.size, fallback="unimodal")
    t = equal_posterior_point(neg, pos)
    return BinFit(threshold=t, negative=neg, positive=pos, n_pixels=x.size)


def otsu_threshold(x, nbins: int = 256) -> float:
    x = np.asarray(x, dtype=np.float64).ravel()
    lo, hi = x.min(), x.max()
    if hi - lo <= 1e-12:
        return float(lo)
    hist, edges = np.histogram(x, bins=nbins, range=(lo, hi))
    w0 = np.cumsum(hist)
    w1 = w0[-1] - w0
    m0 = np.cumsum(hist * 0.5 * (edges[:-1] + edges[1:]))
    mean0 = m0 / np.maximum(w0, 1)
    mean1 = (m0[-1] - m0) / np.maximum(w1, 1)
    between = w0 * w1 * (mean0 - mean1) ** 2
    return float(edges[np.argmax(between[:-1]) + 1])


def fit_classifier(dab: np.ndarray, lum: LuminanceImage, params: LamtParams = LamtParams()) -> BinClassifier:
    dab = np.asarray(dab, dtype=np.float64)
    if dab.shape != lum.shape:
        raise ValidationError(f"DAB shape {dab.shape} != luminance shape {lum.shape}")
    rng = np.random.default_rng(params.seed)
    bin_idx = partition_luminance(lum, params.k_bins)
    usable = lum.data <= params.exclude_above
    fits = [fit_bin_classifier(dab[usable & (bin_idx == k)], params, rng) for k in range(params.k_bins)]

    valid = [k for k, f in enumerate(fits) if not f.is_fallback]
    resolved = []
    for k, f in enumerate(fits):
        if not f.is_fallback:
            t = f.threshold
        elif valid:
            nearest = min(valid, key=lambda j: (abs(j - k), j))
            t = fits[nearest].threshold
        else:
            pool = dab[usable] if usable.any() else dab
            t = otsu_threshold(pool)
            log.debug("bin %d: no populated bins, global Otsu threshold %.4f", k, t)
        t = max(float(t), params.min_threshold)
        resolved.append(BinFit(t, f.negative, f.positive, f.n_pixels, f.fallback))
    return BinClassifier(bin_boundaries(params.k_bins), tuple(resolved))


def apply_classifier(dab: np.ndarray, lum: LuminanceImage, clf: BinClassifier) -> StainClassMap:
    bin_idx = partition_luminance(lum, len(clf.bins))
    # ties go negative
    return StainClassMap(np.asarray(dab) > clf.thresholds[bin_idx])


def classify_stain(dab, lum: LuminanceImage, k_bins: int | None = None, params: LamtParams | None = None) -> StainClassMap:
    """``dab`` may be a StainChannels image or a plain DAB array."""
    params = params or LamtParams()
    if k_bins is not None and k_bins != params.k_bins:
        params = LamtParams(**{**params.__dict__, "k_bins": k_bins})
    dab = getattr(dab, "dab", dab)
    clf = fit_classifier(dab, lum, params)
    return apply_classifier(dab, lum, clf)


def intensity_description(lum: LuminanceImage, cls: StainClassMap) -> IntensityImage:
    ensure_same_shape(lum, cls)
    raw = np.where(cls.positive, lum.data, 255.0 + (255.0 - lum.data))
    return IntensityImage(np.clip(raw / RAW_SCALE, 0.0, 1.0))


def build_region_image(intensity: IntensityImage, mask: MaskImage) -> IntensityImage:
    ensure_same_shape(intensity, mask)
    return IntensityImage(intensity.data * mask.data)
