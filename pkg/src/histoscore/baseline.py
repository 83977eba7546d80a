"""Area-percentage (NAP) and nucleus-count (NNP) H-Score baselines."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    RAW_SCALE,
    HScore,
    InstanceLabelMap,
    IntensityFractions,
    IntensityImage,
    MaskImage,
    ValidationError,
    ensure_same_shape,
    h_score,
)
from .segmentation import instance_mean_intensity

UNSTAINED, WEAK, MODERATE, STRONG = 0, 1, 2, 3


@dataclass(frozen=True)
class IntensityThresholds:
    """Band edges on the raw 0-510 scale.

    strong: raw < b1, moderate: b1 <= raw < b2, weak: b2 <= raw < b3;
    anything else is unstained.
    """

    b1: float = 85.0
    b2: float = 170.0
    b3: float = 255.0

    def __post_init__(self):
        if not (self.b1 < self.b2 < self.b3 <= 255.0):
            raise ValidationError(f"thresholds must satisfy b1 < b2 < b3 <= 255: {self}")

    def band(self, raw) -> np.ndarray:
        raw = np.asarray(raw, dtype=np.float64)
        out = np.full(raw.shape, UNSTAINED, dtype=np.int8)
        out[(raw >= self.b2) & (raw < self.b3)] = WEAK
        out[(raw >= self.b1) & (raw < self.b2)] = MODERATE
        out[raw < self.b1] = STRONG
        return out


def _fractions(bands: np.ndarray) -> IntensityFractions:
    counts = np.bincount(bands.ravel(), minlength=4)
    return IntensityFractions.from_counts(
        weak=counts[WEAK], moderate=counts[MODERATE], strong=counts[STRONG], unstained=counts[UNSTAINED]
    )


def tumour_fraction_ok(tumour_mask: MaskImage, tissue_mask: MaskImage, minimum: float = 15.0) -> bool:
    """Whether tumour occupies more than ``minimum`` percent of the tissue."""
    ensure_same_shape(tumour_mask, tissue_mask)
    tissue = tissue_mask.area
    return tissue > 0 and 100.0 * tumour_mask.area / tissue > minimum


def nap_score(
    intensity: IntensityImage,
    tissue_mask: MaskImage,
    thresholds: IntensityThresholds = IntensityThresholds(),
) -> tuple[HScore, IntensityFractions]:
    ensure_same_shape(intensity, tissue_mask)
    inside = tissue_mask.data.astype(bool)
    if not inside.any():
        raise ValidationError("tissue mask is empty")
    raw = intensity.data[inside] * RAW_SCALE
    fractions = _fractions(thresholds.band(raw))
    return h_score(fractions), fractions


def nnp_score(
    labels: InstanceLabelMap,
    intensity: IntensityImage,
    thresholds: IntensityThresholds = IntensityThresholds(),
) -> tuple[HScore, IntensityFractions]:
    means = instance_mean_intensity(labels, intensity)
    if not means:
        raise ValidationError("no nuclei to score")
    fractions = _fractions(thresholds.band(np.array(means) * RAW_SCALE))
    return h_score(fractions), fractions
