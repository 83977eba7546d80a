"""Immunohistochemistry H-Score estimation from tissue microarray images.

Stain separation, luminance-adaptive stain classification, nucleus
segmentation, baseline scorers, a small numpy CNN engine for the
score-regression networks, synthetic scenes and evaluation tools.
"""

from .core import (
    HScore,
    ImageFormatError,
    IntensityFractions,
    IntensityImage,
    MaskImage,
    RgbImage,
    ValidationError,
    h_score,
)
from .stain import DAB_H, StainMatrix, separate

__version__ = "0.1.0"

__all__ = [
    "DAB_H",
    "HScore",
    "ImageFormatError",
    "IntensityFractions",
    "IntensityImage",
    "MaskImage",
    "RgbImage",
    "StainMatrix",
    "ValidationError",
    "h_score",
    "separate",
]
