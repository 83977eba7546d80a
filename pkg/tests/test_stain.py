import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st

from histoscore.core import OdImage, RgbImage, ValidationError
from histoscore.stain import (
    DAB_H,
    DegenerateMatrixError,
    StainMatrix,
    colour_deconvolve,
    complete_stain_matrix,
    deconvolve_array,
    luminance,
    od_to_rgb,
    render_od,
    separate,
    to_optical_density,
)

FULL = complete_stain_matrix(DAB_H)


def _pixel(rgb):
    return RgbImage(np.array(rgb, dtype=np.uint8).reshape(1, 1, 3))


@pytest.mark.parametrize(
    "rgb, expected",
    [
        ((255, 255, 255), 0.0),
        ((0, 0, 0), -np.log(1 / 255)),
        ((94, 94, 94), 0.99797),
    ],
)
def test_optical_density_examples(rgb, expected):
    od = to_optical_density(_pixel(rgb)).data[0, 0]
    np.testing.assert_allclose(od, [expected] * 3, atol=5e-5)


def test_optical_density_94_matches_direct_log():
    od = to_optical_density(_pixel((94, 94, 94))).data[0, 0, 0]
    assert od == pytest.approx(-np.log(94 / 255), abs=1e-12)


def test_optical_density_is_monotone_decreasing():
    ramp = np.repeat(np.arange(256, dtype=np.uint8)[None, :, None], 3, axis=2)
    od = to_optical_density(RgbImage(ramp)).data[0, :, 0]
    assert np.all(np.diff(od) <= 0)
    assert np.all(np.diff(od[1:]) < 0)


def test_optical_density_rejects_bad_i0():
    with pytest.raises(ValidationError):
        to_optical_density(_pixel((1, 2, 3)), i0=(255, 0, 255))


def test_complete_orthonormal_case():
    m = complete_stain_matrix(StainMatrix([[1, 0, 0], [0, 1, 0], [0, 0, 0]]))
    np.testing.assert_allclose(m.residual, [0, 0, 1])


def test_complete_dab_h_matches_componentwise_cross_product():
    a, b = np.array([0.268, 0.570, 0.776]), np.array([0.650, 0.704, 0.286])
    cross = np.array([a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]])
    np.testing.assert_allclose(FULL.residual, cross / np.sqrt(cross @ cross), atol=1e-12)
    assert abs(FULL.residual @ a) < 1e-12 and abs(FULL.residual @ b) < 1e-12
    assert np.isfinite(FULL.condition_number)


def test_complete_rejects_parallel_rows():
    with pytest.raises(DegenerateMatrixError):
        complete_stain_matrix(StainMatrix([[1, 0, 0], [1, 0, 0], [0, 0, 0]]))


def test_matrix_rejects_non_unit_rows():
    with pytest.raises(ValidationError):
        StainMatrix([[0.5, 0, 0], [0, 1, 0], [0, 0, 0]])


def test_deconvolve_needs_complete_matrix():
    with pytest.raises(DegenerateMatrixError):
        deconvolve_array(np.zeros((1, 1, 3)), DAB_H)


@pytest.mark.parametrize(
    "od, expected",
    [
        (FULL.dab, (1, 0, 0)),
        (np.zeros(3), (0, 0, 0)),
        (FULL.dab + FULL.hem, (1, 1, 0)),
    ],
)
def test_deconvolve_examples(od, expected):
    c = colour_deconvolve(OdImage(np.asarray(od).reshape(1, 1, 3)), FULL)
    np.testing.assert_allclose(c.data[0, 0], expected, atol=1e-6)
    c64 = deconvolve_array(np.asarray(od), FULL)
    np.testing.assert_allclose(c64, expected, atol=1e-9)


def test_deconvolve_agrees_with_lu_solver(rng):
    od = rng.uniform(0, 3, size=(50, 3))
    lu = scipy.linalg.lu_factor(FULL.rows.T)
    oracle = scipy.linalg.lu_solve(lu, od.T).T
    np.testing.assert_allclose(deconvolve_array(od, FULL), oracle, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 3), min_size=3, max_size=3))
def test_round_trip_property(conc):
    c = np.asarray(conc)
    od = render_od(c, FULL)
    back = deconvolve_array(od, FULL)
    np.testing.assert_allclose(back, c, atol=1e-9)
    assert np.linalg.norm(render_od(back, FULL) - od) <= 1e-6 * (1 + np.linalg.norm(od))


@pytest.mark.parametrize(
    "rgb, expected",
    [((255, 255, 255), 255.0), ((255, 0, 0), 76.245), ((0, 255, 0), 149.685), ((0, 0, 255), 29.07)],
)
def test_luminance_examples(rgb, expected):
    assert luminance(_pixel(rgb)).data[0, 0] == pytest.approx(expected, abs=1e-9)


def test_luminance_never_exceeds_255(rng):
    img = RgbImage(rng.integers(0, 256, (20, 20, 3)))
    lum = luminance(img).data
    assert lum.max() <= 255.0
    assert np.all(lum <= img.data.max(axis=2) + 1e-9)


def test_separate_recovers_rendered_dab(rng):
    conc = np.zeros((8, 8, 3))
    conc[..., 0] = rng.uniform(0.2, 1.0, (8, 8))
    rgb = np.clip(np.round(od_to_rgb(render_od(conc, FULL))), 0, 255)
    channels, lum = separate(RgbImage(rgb))
    # 8-bit quantization is the only error source
    np.testing.assert_allclose(channels.dab, conc[..., 0], atol=0.02)
    assert np.abs(channels.hem).max() < 0.02
    assert lum.shape == (8, 8)


def test_matrix_file_round_trip(tmp_path):
    FULL.to_file(tmp_path / "m.txt")
    np.testing.assert_allclose(StainMatrix.from_file(tmp_path / "m.txt").rows, FULL.rows, atol=1e-9)
    (tmp_path / "bad.txt").write_text("1 0 0 0 1 0")
    with pytest.raises(ValidationError):
        StainMatrix.from_file(tmp_path / "bad.txt")
