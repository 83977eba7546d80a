"""Optical density, colour deconvolution and Rec. 601 luminance."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import LuminanceImage, OdImage, RgbImage, StainChannels, ValidationError

I0_8BIT = (255.0, 255.0, 255.0)
REC601 = np.array([0.299, 0.587, 0.114])


class DegenerateMatrixError(ValidationError):
    pass


@dataclass(frozen=True, eq=False)
class StainMatrix:
    """Rows are stain OD vectors: DAB, hematoxylin, residual."""

    rows: np.ndarray

    def __post_init__(self):
        rows = np.array(self.rows, dtype=np.float64).reshape(3, 3)
        for i in (0, 1):
            norm = np.linalg.norm(rows[i])
            if abs(norm - 1.0) > 1e-3:
                raise ValidationError(f"stain vector {i} has norm {norm:.5f}, expected 1 +- 1e-3")
        rows.setflags(write=False)
        object.__setattr__(self, "rows", rows)

    @property
    def dab(self) -> np.ndarray:
        return self.rows[0]

    @property
    def hem(self) -> np.ndarray:
        return self.rows[1]

    @property
    def residual(self) -> np.ndarray:
        return self.rows[2]

    @property
    def is_complete(self) -> bool:
        return bool(np.linalg.norm(self.rows[2]) > 0)

    @property
    def condition_number(self) -> float:
        return float(np.linalg.cond(self.rows))

    @classmethod
    def from_file(cls, path) -> "StainMatrix":
        """Nine whitespace-separated reals, row-major."""
        with open(path) as fh:
            values = [float(tok) for tok in fh.read().split()]
        if len(values) != 9:
            raise ValidationError(f"{path}: expected 9 values, found {len(values)}")
        return cls(np.array(values).reshape(3, 3))

    def to_file(self, path) -> None:
        with open(path, "w") as fh:
            for row in self.rows:
                fh.write(" ".join(f"{v:.10g}" for v in row) + "\n")


# DAB-H stain vectors; third row left empty for completion
DAB_H = StainMatrix(
    [
        [0.268, 0.570, 0.776],
        [0.650, 0.704, 0.286],
        [0.0, 0.0, 0.0],
    ]
)


def to_optical_density(img: RgbImage, i0=I0_8BIT) -> OdImage:
    i0 = np.asarray(i0, dtype=np.float64)
    if i0.shape != (3,) or np.any(i0 <= 0):
        raise ValidationError("i0 must be three positive reals")
    rgb = img.data.astype(np.float64)
    # zeros clamp to 1 so the log stays finite
    rgb = np.clip(rgb, 1.0, i0)
    od = -np.log(rgb / i0)
    return OdImage(np.maximum(od, 0.0))


def complete_stain_matrix(m: StainMatrix) -> StainMatrix:
    """Replace the third row by the unit cross product of the first two."""
    cross = np.cross(m.rows[0], m.rows[1])
    norm = np.linalg.norm(cross)
    if norm < 1e-8:
        raise DegenerateMatrixError("first two stain vectors are parallel")
    return StainMatrix(np.vstack([m.rows[0], m.rows[1], cross / norm]))


def deconvolve_array(od: np.ndarray, m: StainMatrix) -> np.ndarray:
    """Concentrations c with od = c @ rows, computed in double precision."""
    rows = m.rows
    if not m.is_complete or np.linalg.matrix_rank(rows) < 3:
        raise DegenerateMatrixError("stain matrix is not invertible; complete it first")
    od = np.asarray(od, dtype=np.float64)
    flat = od.reshape(-1, 3)
    conc = np.linalg.solve(rows.T, flat.T).T
    return conc.reshape(od.shape)


def colour_deconvolve(od: OdImage, m: StainMatrix) -> StainChannels:
    return StainChannels(deconvolve_array(od.data, m))


def render_od(conc: np.ndarray, m: StainMatrix) -> np.ndarray:
    """Forward model: concentrations (..., 3) to optical densities."""
    return np.asarray(conc, dtype=np.float64) @ m.rows


def od_to_rgb(od: np.ndarray, i0=I0_8BIT) -> np.ndarray:
    """Inverse Beer-Lambert transform, unclipped and unrounded."""
    return np.asarray(i0, dtype=np.float64) * np.exp(-np.asarray(od, dtype=np.float64))


def luminance(img: RgbImage) -> LuminanceImage:
    lum = img.data.astype(np.float64) @ REC601
    return LuminanceImage(np.clip(lum, 0.0, 255.0))


def separate(img: RgbImage, m: StainMatrix = DAB_H) -> tuple[StainChannels, LuminanceImage]:
    """Convenience: deconvolved channels and luminance of an RGB image."""
    if not m.is_complete:
        m = complete_stain_matrix(m)
    return colour_deconvolve(to_optical_density(img), m), luminance(img)
