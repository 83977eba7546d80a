import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from histoscore.core import (
    HScore,
    ImageFormatError,
    InstanceLabelMap,
    IntensityFractions,
    IntensityImage,
    LuminanceImage,
    MaskImage,
    OdImage,
    RgbImage,
    ValidationError,
    h_score,
    read_intensity,
    read_labels,
    read_mask,
    read_rgb,
    write_intensity,
    write_labels,
    write_mask,
    write_rgb,
)


@pytest.mark.parametrize(
    "fractions, expected",
    [((100, 0, 0, 0), 100.0), ((0, 0, 100, 0), 300.0), ((10, 20, 30, 40), 140.0)],
)
def test_h_score_examples(fractions, expected):
    assert h_score(IntensityFractions(*fractions)).value == pytest.approx(expected, abs=1e-12)


def test_fractions_must_sum_to_100():
    with pytest.raises(ValidationError):
        IntensityFractions(10, 20, 30, 39)
    with pytest.raises(ValidationError):
        IntensityFractions(-5, 50, 25, 30)


def test_fractions_from_counts():
    f = IntensityFractions.from_counts(weak=1, moderate=1, strong=2, unstained=6)
    np.testing.assert_allclose(f.as_tuple(), (10, 10, 20, 60))


def _fractions(draw_parts):
    parts = np.asarray(draw_parts, dtype=float) + 1e-3
    parts = 100 * parts / parts.sum()
    parts[3] = 100 - parts[:3].sum()
    return IntensityFractions(*parts)


unit4 = st.lists(st.floats(0, 1), min_size=4, max_size=4)


@settings(max_examples=60, deadline=None)
@given(unit4, unit4, st.floats(0, 1))
def test_h_score_is_linear_in_convex_mixes(p1, p2, a):
    f1, f2 = _fractions(p1), _fractions(p2)
    mix = [a * x + (1 - a) * y for x, y in zip(f1.as_tuple(), f2.as_tuple())]
    mix[3] = 100 - sum(mix[:3])
    lhs = h_score(IntensityFractions(*mix)).value
    rhs = a * h_score(f1).value + (1 - a) * h_score(f2).value
    assert lhs == pytest.approx(rhs, abs=1e-9)


def test_hscore_range_and_rounding():
    with pytest.raises(ValidationError):
        HScore(300.5)
    with pytest.raises(ValidationError):
        HScore(-1)
    assert HScore(142.6).rounded(5) == 145
    assert float(HScore(12.25)) == 12.25


@pytest.mark.parametrize(
    "cls, length",
    [(RgbImage, 3 * 4 * 2 - 1), (LuminanceImage, 7), (MaskImage, 9), (IntensityImage, 0)],
)
def test_constructors_reject_wrong_buffer_length(cls, length):
    with pytest.raises(ValidationError):
        cls.from_buffer(4, 2, np.zeros(length))


def test_from_buffer_row_major():
    img = LuminanceImage.from_buffer(3, 2, np.arange(6))
    assert img.shape == (2, 3)
    assert img.data[1, 0] == 3


def test_value_invariants():
    with pytest.raises(ValidationError):
        LuminanceImage(np.full((2, 2), 255.5))
    with pytest.raises(ValidationError):
        IntensityImage(np.full((2, 2), 1.01))
    with pytest.raises(ValidationError):
        MaskImage(np.array([[0, 2]]))
    with pytest.raises(ValidationError):
        OdImage(np.full((1, 1, 3), -0.1))
    with pytest.raises(ValidationError):
        RgbImage(np.full((1, 1, 3), 256))
    with pytest.raises(ValidationError):
        InstanceLabelMap(np.array([[0, 2]]))
    with pytest.raises(ValidationError):
        InstanceLabelMap(np.array([[1, 0, 1]]))


def test_images_are_read_only():
    img = MaskImage(np.ones((2, 2)))
    with pytest.raises(ValueError):
        img.data[0, 0] = 0
    assert img.area == 4


def test_rgb_png_round_trip(tmp_path, rng):
    img = RgbImage(rng.integers(0, 256, (5, 7, 3)))
    write_rgb(img, tmp_path / "a.png")
    np.testing.assert_array_equal(read_rgb(tmp_path / "a.png").data, img.data)


def test_mask_png_is_0_255(tmp_path):
    mask = MaskImage(np.indices((4, 4)).sum(axis=0) % 2)
    write_mask(mask, tmp_path / "m.png")
    raw = np.array(Image.open(tmp_path / "m.png"))
    assert set(np.unique(raw)) == {0, 255}
    np.testing.assert_array_equal(read_mask(tmp_path / "m.png").data, mask.data)


def test_mask_with_other_values_is_a_format_error(tmp_path):
    Image.fromarray(np.full((3, 3), 128, dtype=np.uint8)).save(tmp_path / "bad.png")
    with pytest.raises(ImageFormatError):
        read_mask(tmp_path / "bad.png")


def test_intensity_png_is_16_bit_rounded(tmp_path, rng):
    img = IntensityImage(rng.random((6, 6)))
    write_intensity(img, tmp_path / "i.png")
    raw = np.array(Image.open(tmp_path / "i.png"))
    np.testing.assert_array_equal(raw, np.round(img.data * 65535).astype(np.uint16))
    np.testing.assert_allclose(read_intensity(tmp_path / "i.png").data, img.data, atol=0.5 / 65535 + 1e-12)


def test_label_png_round_trip(tmp_path):
    labels = InstanceLabelMap(np.array([[0, 1, 1], [2, 0, 3]]))
    write_labels(labels, tmp_path / "l.png")
    back = read_labels(tmp_path / "l.png")
    np.testing.assert_array_equal(back.data, labels.data)
    assert back.count == 3


def test_unreadable_rgb_is_a_format_error(tmp_path):
    (tmp_path / "x.png").write_bytes(b"not a png")
    with pytest.raises(ImageFormatError):
        read_rgb(tmp_path / "x.png")
