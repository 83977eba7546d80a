import filecmp

import numpy as np
import pytest

from histoscore.core import IntensityFractions, h_score
from histoscore.lamt import classify_stain
from histoscore.stain import separate
from histoscore.synth import (
    DatasetSpec,
    SynthSceneSpec,
    allocate_counts,
    concentration_for_luminance,
    generate_dataset,
    generate_scene,
    proportions_for_score,
    read_manifest,
)
from histoscore.stain import DAB_H, REC601


def test_no_tumour_scores_zero():
    assert generate_scene(SynthSceneSpec(tumour_fraction=0.0)).hscore.value == 0.0


def test_all_strong_scores_300():
    s = generate_scene(SynthSceneSpec(n_nuclei=12, band_proportions=(0, 0, 0, 1), tumour_fraction=1.0))
    assert s.hscore.value == pytest.approx(300.0)


def test_equal_bands_score_150():
    s = generate_scene(SynthSceneSpec(n_nuclei=16, tumour_fraction=0.5))
    assert s.hscore.value == pytest.approx(150.0)


def test_label_equals_h_score_of_fractions():
    for seed in range(5):
        s = generate_scene(SynthSceneSpec(band_proportions=(0.1, 0.3, 0.4, 0.2), seed=seed))
        assert s.hscore.value == pytest.approx(h_score(s.fractions).value)


def test_rgb_is_valid_uint8():
    s = generate_scene(SynthSceneSpec(seed=3))
    assert s.rgb.data.dtype == np.uint8 and s.rgb.data.shape == (64, 64, 3)


def test_masks_nest():
    s = generate_scene(SynthSceneSpec(seed=4))
    assert not np.any(s.tumour_mask.data.astype(bool) & ~s.nuclei_mask.data.astype(bool))


def test_target_luminance_is_hit():
    c = concentration_for_luminance(127.0, DAB_H.dab)
    assert REC601 @ (255 * np.exp(-c * DAB_H.dab)) == pytest.approx(127.0, abs=1e-9)


def test_allocate_counts_sums_to_n():
    np.testing.assert_array_equal(allocate_counts([0.25] * 4, 10), [3, 3, 2, 2])
    assert allocate_counts([0.1, 0.2, 0.3, 0.4], 7).sum() == 7


def test_proportions_hit_target(rng):
    for target in (0, 37.5, 150, 280, 300):
        p = proportions_for_score(target, rng)
        assert p @ [0, 100, 200, 300] == pytest.approx(target)


def test_dab_nuclei_classified_positive():
    hits = total = 0
    for seed in range(5):
        s = generate_scene(SynthSceneSpec(band_proportions=(0, 1 / 3, 1 / 3, 1 / 3), tumour_fraction=0.6, seed=seed))
        channels, lum = separate(s.rgb)
        pos = classify_stain(channels, lum).positive
        dab = s.tumour_mask.data.astype(bool)
        hits += int(pos[dab].sum())
        total += int(dab.sum())
    assert hits / total >= 0.98


def test_dataset_files_and_manifest(tmp_path):
    rows = generate_dataset(10, DatasetSpec(), seed=2, out_dir=tmp_path)
    assert len(rows) == 10
    for r in read_manifest(tmp_path / "manifest.csv"):
        assert r.path_rgb.exists() and r.path_nuclei_mask.exists() and r.path_tumour_mask.exists()
    back = read_manifest(tmp_path / "manifest.csv")
    np.testing.assert_allclose([r.hscore for r in back], [r.hscore for r in rows])


def test_dataset_is_byte_identical(tmp_path):
    generate_dataset(6, DatasetSpec(), seed=9, out_dir=tmp_path / "a")
    generate_dataset(6, DatasetSpec(), seed=9, out_dir=tmp_path / "b")
    assert filecmp.cmp(tmp_path / "a/manifest.csv", tmp_path / "b/manifest.csv", shallow=False)
    for i in range(6):
        name = f"rgb/tma_{i:04d}.png"
        assert filecmp.cmp(tmp_path / "a" / name, tmp_path / "b" / name, shallow=False)


def test_imbalanced_scores_are_unimodal_low():
    rng = np.random.default_rng(0)
    from histoscore.synth import sample_score

    scores = np.array([sample_score("imbalanced", rng) for _ in range(5000)])
    hist, _ = np.histogram(scores, bins=6, range=(0, 300))
    peak = int(np.argmax(hist))
    assert peak <= 2
    assert np.all(np.diff(hist[: peak + 1]) >= 0) and np.all(np.diff(hist[peak:]) <= 0)


def test_fractions_sum_to_100():
    s = generate_scene(SynthSceneSpec(seed=7, band_proportions=(0.4, 0.3, 0.2, 0.1)))
    f = s.fractions
    assert isinstance(f, IntensityFractions)
    assert f.wsn + f.msn + f.ssn + f.unstained == pytest.approx(100.0)
