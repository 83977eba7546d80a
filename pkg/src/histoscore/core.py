"""Image containers, the H-Score value type and PNG persistence.

Containers are thin frozen wrappers around read-only numpy arrays. They
validate shape and value range on construction and never do pixel math.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy import ndimage as ndi


class ValidationError(ValueError):
    pass


class ImageFormatError(ValueError):
    pass


def _frozen(arr: np.ndarray, dtype) -> np.ndarray:
    out = np.array(arr, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class _Image:
    data: np.ndarray

    _dtype = np.float32
    _channels = None

    def __post_init__(self):
        data = np.asarray(self.data)
        if self._channels is None:
            if data.ndim != 2:
                raise ValidationError(f"{type(self).__name__} expects a 2-D array, got shape {data.shape}")
        elif data.ndim != 3 or data.shape[2] != self._channels:
            raise ValidationError(
                f"{type(self).__name__} expects shape (h, w, {self._channels}), got {data.shape}"
            )
        if data.shape[0] < 1 or data.shape[1] < 1:
            raise ValidationError("image must be at least 1x1")
        data = _frozen(data, self._dtype)
        self._check(data)
        object.__setattr__(self, "data", data)

    def _check(self, data: np.ndarray) -> None:
        if not np.all(np.isfinite(data)):
            raise ValidationError(f"{type(self).__name__} contains non-finite values")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[:2]

    @classmethod
    def from_buffer(cls, width: int, height: int, buffer):
        """Build from a flat row-major buffer, checking its length."""
        flat = np.asarray(buffer).ravel()
        per_pixel = cls._channels or 1
        if width <= 0 or height <= 0:
            raise ValidationError("width and height must be positive")
        if flat.size != per_pixel * width * height:
            raise ValidationError(
                f"buffer length {flat.size} != {per_pixel}*{width}*{height}"
            )
        shape = (height, width, per_pixel) if cls._channels else (height, width)
        return cls(flat.reshape(shape))


class RgbImage(_Image):
    _dtype = np.uint8
    _channels = 3

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.dtype != np.uint8 and data.size and (data.min() < 0 or data.max() > 255):
            raise ValidationError("RGB values must lie in [0, 255]")
        super().__post_init__()

    def _check(self, data):
        pass


class LuminanceImage(_Image):
    _dtype = np.float64

    def _check(self, data):
        super()._check(data)
        if data.min() < 0 or data.max() > 255:
            raise ValidationError("luminance values must lie in [0, 255]")


class OdImage(_Image):
    _dtype = np.float64
    _channels = 3

    def _check(self, data):
        super()._check(data)
        if data.min() < 0:
            raise ValidationError("optical densities must be >= 0")


class StainChannels(_Image):
    """Per-pixel (dab, hem, residual) concentrations; negatives are allowed."""

    _channels = 3

    @property
    def dab(self) -> np.ndarray:
        return self.data[..., 0]

    @property
    def hem(self) -> np.ndarray:
        return self.data[..., 1]

    @property
    def residual(self) -> np.ndarray:
        return self.data[..., 2]

    @property
    def negative_fraction(self) -> float:
        """Fraction of pixels with any negative concentration."""
        return float(np.mean(np.any(self.data < 0, axis=-1)))


class StainClassMap(_Image):
    """True marks a DAB-positive pixel, False a negative one."""

    _dtype = np.bool_

    def _check(self, data):
        pass

    @property
    def positive(self) -> np.ndarray:
        return self.data


class IntensityImage(_Image):
    """Normalized stain intensity description, values in [0, 1]."""

    _dtype = np.float64

    def _check(self, data):
        super()._check(data)
        if data.min() < 0 or data.max() > 1:
            raise ValidationError("intensity values must lie in [0, 1]")

    @property
    def raw(self) -> np.ndarray:
        """Values on the un-normalized [0, 510] scale."""
        return self.data * RAW_SCALE


class MaskImage(_Image):
    _dtype = np.uint8

    def _check(self, data):
        if not np.isin(data, (0, 1)).all():
            raise ValidationError("mask must be binary {0, 1}")

    @property
    def area(self) -> int:
        return int(self.data.sum())


class InstanceLabelMap(_Image):
    _dtype = np.int32

    def _check(self, data):
        if data.min() < 0:
            raise ValidationError("labels must be non-negative")
        ids = np.unique(data)
        ids = ids[ids > 0]
        if ids.size and (ids[0] != 1 or ids[-1] != ids.size):
            raise ValidationError("instance ids must form the contiguous range 1..N")
        for lab, box in enumerate(ndi.find_objects(data), start=1):
            if box is not None and ndi.label(data[box] == lab)[1] > 1:
                raise ValidationError(f"instance {lab} is not 4-connected")

    @property
    def count(self) -> int:
        return int(self.data.max(initial=0))


RAW_SCALE = 510.0


@dataclass(frozen=True)
class IntensityFractions:
    """Percentages of weakly, moderately and strongly stained nuclei."""

    wsn: float
    msn: float
    ssn: float
    unstained: float

    def __post_init__(self):
        parts = (self.wsn, self.msn, self.ssn, self.unstained)
        if any(not np.isfinite(p) or p < -1e-9 or p > 100 + 1e-9 for p in parts):
            raise ValidationError(f"fractions must lie in [0, 100]: {parts}")
        if abs(sum(parts) - 100.0) > 1e-9:
            raise ValidationError(f"fractions must sum to 100, got {sum(parts)!r}")

    @classmethod
    def from_counts(cls, weak: float, moderate: float, strong: float, unstained: float):
        total = weak + moderate + strong + unstained
        if total <= 0:
            raise ValidationError("counts must have a positive total")
        wsn, msn, ssn = (100.0 * weak / total, 100.0 * moderate / total, 100.0 * strong / total)
        return cls(wsn, msn, ssn, max(100.0 - wsn - msn - ssn, 0.0))

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.wsn, self.msn, self.ssn, self.unstained)


@dataclass(frozen=True, order=True)
class HScore:
    value: float

    def __post_init__(self):
        if not (0.0 <= self.value <= 300.0):
            raise ValidationError(f"H-Score {self.value!r} outside [0, 300]")

    def __float__(self):
        return float(self.value)

    def rounded(self, step: float = 1.0) -> float:
        return round(self.value / step) * step


def h_score(fractions: IntensityFractions) -> HScore:
    value = 1.0 * fractions.wsn + 2.0 * fractions.msn + 3.0 * fractions.ssn
    # float summation can overshoot the bounds by an ulp
    return HScore(min(max(value, 0.0), 300.0))


# -- PNG persistence --------------------------------------------------------


def _open_array(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.array(im)
    except (OSError, ValueError) as exc:
        raise ImageFormatError(f"cannot read image {path}: {exc}") from exc


def read_rgb(path) -> RgbImage:
    try:
        with Image.open(path) as im:
            return RgbImage(np.array(im.convert("RGB")))
    except (OSError, ValueError) as exc:
        raise ImageFormatError(f"cannot read image {path}: {exc}") from exc


def write_rgb(img: RgbImage, path) -> None:
    Image.fromarray(np.ascontiguousarray(img.data), mode="RGB").save(path)


def read_mask(path) -> MaskImage:
    """Single-channel PNG holding only 0 and 255."""
    arr = _open_array(path)
    if arr.ndim != 2:
        raise ImageFormatError(f"{path}: mask must be single-channel, got shape {arr.shape}")
    bad = ~np.isin(arr, (0, 255))
    if bad.any():
        raise ImageFormatError(f"{path}: mask values must be 0 or 255, found {arr[bad][0]}")
    return MaskImage((arr == 255).astype(np.uint8))


def write_mask(mask: MaskImage, path) -> None:
    Image.fromarray((mask.data * 255).astype(np.uint8), mode="L").save(path)


def write_intensity(img: IntensityImage, path) -> None:
    arr = np.round(img.data * 65535.0).astype(np.uint16)
    Image.fromarray(arr).save(path)


def read_intensity(path) -> IntensityImage:
    arr = _open_array(path)
    if arr.ndim != 2:
        raise ImageFormatError(f"{path}: intensity image must be single-channel")
    if arr.dtype == np.uint8:
        return IntensityImage(arr / 255.0)
    return IntensityImage(arr.astype(np.float64) / 65535.0)


def write_labels(labels: InstanceLabelMap, path) -> None:
    if labels.count > 65535:
        raise ValidationError("too many instances for a 16-bit label PNG")
    Image.fromarray(labels.data.astype(np.uint16)).save(path)


def read_labels(path) -> InstanceLabelMap:
    arr = _open_array(path)
    if arr.ndim != 2:
        raise ImageFormatError(f"{path}: label image must be single-channel")
    return InstanceLabelMap(arr.astype(np.int32))


def ensure_same_shape(*images) -> None:
    shapes = {tuple(im.shape) for im in images}
    if len(shapes) > 1:
        raise ValidationError(f"image dimensions differ: {sorted(shapes)}")


__all__ = [
    "ValidationError",
    "ImageFormatError",
    "RgbImage",
    "LuminanceImage",
    "OdImage",
    "StainChannels",
    "StainClassMap",
    "IntensityImage",
    "MaskImage",
    "InstanceLabelMap",
    "IntensityFractions",
    "HScore",
    "h_score",
    "RAW_SCALE",
    "ensure_same_shape",
    "read_rgb",
    "write_rgb",
    "read_mask",
    "write_mask",
    "read_intensity",
    "write_intensity",
    "read_labels",
    "write_labels",
]
