"""Per-image feature preparation and the batch scoring pipeline."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .baseline import IntensityThresholds, nap_score, nnp_score
from .core import (
    IntensityImage,
    MaskImage,
    RgbImage,
    ValidationError,
    read_rgb,
    write_intensity,
    write_labels,
    write_mask,
)
from .lamt import LamtParams, build_region_image, classify_stain, intensity_description
from .segmentation import WatershedParams, load_mask, seeded_watershed
from .stain import DAB_H, StainMatrix, separate
from .synth import ManifestRow, read_manifest

log = logging.getLogger(__name__)

NETWORK_ARCHS = ("rgb_cnn", "ra_cnn", "ram_cnn")
BASELINES = ("nap", "nnp")
# rotated-in corners of an RGB input look like empty glass, not black
RGB_FILL = 1.0


class PipelineError(RuntimeError):
    """A stage failed for one image; carries the stage name and image id."""

    def __init__(self, stage: str, image_id: str, cause: Exception | str):
        self.stage = stage
        self.image_id = image_id
        super().__init__(f"stage {stage!r} failed on image {image_id!r}: {cause}")


@dataclass(frozen=True)
class ImageFeatures:
    image_id: str
    rgb: RgbImage
    intensity: IntensityImage
    nuclei_mask: MaskImage
    tumour_mask: MaskImage

    @property
    def sini(self) -> IntensityImage:
        return build_region_image(self.intensity, self.nuclei_mask)

    @property
    def siti(self) -> IntensityImage:
        return build_region_image(self.intensity, self.tumour_mask)


@dataclass(frozen=True)
class FeatureConfig:
    matrix: StainMatrix = DAB_H
    lamt: LamtParams = LamtParams()
    # optional mask networks (Model instances); manifest masks are used otherwise
    nuclei_model: object = None
    tumour_model: object = None
    mask_cutoff: float = 0.5


def _predict_mask(model, intensity: IntensityImage, cutoff: float) -> MaskImage:
    prob = model.predict([intensity.data[None, None]])[0, 0]
    return MaskImage((prob > cutoff).astype(np.uint8))


def _mask(row: ManifestRow, key: str, model, intensity: IntensityImage, cfg: FeatureConfig) -> MaskImage:
    if model is not None:
        return _predict_mask(model, intensity, cfg.mask_cutoff)
    path = getattr(row, key)
    if path is None:
        raise ValidationError(f"manifest has no {key} and no mask network is configured")
    mask = load_mask(path)
    if mask.shape != intensity.shape:
        raise ValidationError(f"mask {path} is {mask.shape}, image is {intensity.shape}")
    return mask


def compute_features(row: ManifestRow, cfg: FeatureConfig = FeatureConfig()) -> ImageFeatures:
    """RGB -> stain separation -> LAMT intensity image -> masks."""
    image_id = row.image_id
    try:
        rgb = read_rgb(row.path_rgb)
    except (OSError, ValueError) as exc:
        raise PipelineError("load", image_id, exc) from exc
    try:
        channels, lum = separate(rgb, cfg.matrix)
    except ValueError as exc:
        raise PipelineError("stain", image_id, exc) from exc
    try:
        intensity = intensity_description(lum, classify_stain(channels, lum, params=cfg.lamt))
    except ValueError as exc:
        raise PipelineError("lamt", image_id, exc) from exc
    try:
        nuclei = _mask(row, "path_nuclei_mask", cfg.nuclei_model, intensity, cfg)
        tumour = _mask(row, "path_tumour_mask", cfg.tumour_model, intensity, cfg)
    except (OSError, ValueError) as exc:
        raise PipelineError("segmentation", image_id, exc) from exc
    return ImageFeatures(image_id, rgb, intensity, nuclei, tumour)


def load_features(rows, cfg: FeatureConfig = FeatureConfig()) -> list[ImageFeatures]:
    return [compute_features(r, cfg) for r in rows]


def network_inputs(features: list[ImageFeatures], arch: str) -> list[np.ndarray]:
    """Per-column (n, c, h, w) float32 stacks for a scoring network."""
    if arch == "ram_cnn":
        return [
            np.stack([f.sini.data for f in features])[:, None].astype(np.float32),
            np.stack([f.siti.data for f in features])[:, None].astype(np.float32),
        ]
    if arch == "ra_cnn":
        return [np.stack([np.stack([f.sini.data, f.siti.data]) for f in features]).astype(np.float32)]
    if arch == "rgb_cnn":
        return [np.stack([f.rgb.data.transpose(2, 0, 1) for f in features]).astype(np.float32) / 255.0]
    raise ValidationError(f"unknown scoring network {arch!r}")


def input_fill(arch: str) -> tuple[float, ...]:
    """Background value per input column, for geometric augmentation."""
    return (RGB_FILL,) if arch == "rgb_cnn" else ()


def input_order(arch: str) -> tuple[int, ...]:
    """Rotation interpolation order per input column.

    Intensity codes are resampled nearest-neighbour: blending a nucleus edge
    with the zero background would manufacture strong-stain values.
    """
    return (1,) if arch == "rgb_cnn" else (0, 0)


def baseline_score(
    feat: ImageFeatures,
    method: str,
    thresholds: IntensityThresholds = IntensityThresholds(),
    watershed: WatershedParams = WatershedParams(),
) -> float:
    """NAP over the tumour-nuclei area, or NNP over watershed instances of it."""
    try:
        if method == "nap":
            return nap_score(feat.intensity, feat.tumour_mask, thresholds)[0].value
        if method == "nnp":
            labels = seeded_watershed(feat.tumour_mask, feat.siti, watershed)
            return nnp_score(labels, feat.intensity, thresholds)[0].value
    except ValueError as exc:
        raise PipelineError(method, feat.image_id, exc) from exc
    raise ValidationError(f"unknown baseline {method!r}")


# -- batch driver -------------------------------------------------------------


@dataclass(frozen=True)
class PipelineConfig:
    manifest: Path
    out_dir: Path
    method: str = "nap"
    model: Path | None = None
    features: FeatureConfig = FeatureConfig()
    thresholds: IntensityThresholds = IntensityThresholds()
    watershed: WatershedParams = WatershedParams()
    save_intermediates: bool = False

    def __post_init__(self):
        if self.method not in BASELINES + NETWORK_ARCHS:
            raise ValidationError(f"method must be one of {BASELINES + NETWORK_ARCHS}, got {self.method!r}")
        if self.method in NETWORK_ARCHS and self.model is None:
            raise ValidationError(f"method {self.method} needs a model checkpoint")


def _save_intermediates(feat: ImageFeatures, out: Path, labels=None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    write_intensity(feat.intensity, out / f"{feat.image_id}_intensity.png")
    write_intensity(feat.sini, out / f"{feat.image_id}_sini.png")
    write_intensity(feat.siti, out / f"{feat.image_id}_siti.png")
    write_mask(feat.nuclei_mask, out / f"{feat.image_id}_nuclei.png")
    write_mask(feat.tumour_mask, out / f"{feat.image_id}_tumour.png")
    if labels is not None:
        write_labels(labels, out / f"{feat.image_id}_instances.png")


def run_pipeline(cfg: PipelineConfig):
    """Score every manifest image; write predictions.csv, scatter.csv and summary.txt.

    Returns ``(ids, predictions, labels, report)``; the report is None when
    fewer than three labelled images make metrics undefined.
    """
    from .evaluation import evaluate, format_report, write_scatter

    rows = read_manifest(cfg.manifest)
    if not rows:
        raise ValidationError(f"{cfg.manifest}: empty manifest")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = None
    if cfg.method in NETWORK_ARCHS:
        from .nn.checkpoint import load_model

        model = load_model(cfg.model)
        if model.spec.arch != cfg.method:
            raise ValidationError(f"checkpoint holds a {model.spec.arch}, config asks for {cfg.method}")

    ids, preds = [], []
    for row in rows:
        feat = compute_features(row, cfg.features)
        if cfg.method in BASELINES:
            preds.append(baseline_score(feat, cfg.method, cfg.thresholds, cfg.watershed))
        else:
            try:
                preds.append(float(model.predict(network_inputs([feat], cfg.method))[0]))
            except ValueError as exc:
                raise PipelineError("model", feat.image_id, exc) from exc
        if cfg.save_intermediates:
            _save_intermediates(feat, out / "intermediates")
        ids.append(feat.image_id)
        log.info("%s: %.2f", feat.image_id, preds[-1])

    labels = np.array([r.hscore for r in rows])
    preds = np.array(preds)
    with open(out / "predictions.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image_id", "prediction", "label"])
        for i, p, l in zip(ids, preds, labels):
            w.writerow([i, f"{p:.4f}", f"{l:.4f}"])
    write_scatter(preds, labels, out / "scatter.csv")
    report = None
    try:
        report = evaluate(preds, labels)
        summary = format_report(report, title=f"method: {cfg.method}  images: {len(ids)}")
    except ValueError as exc:
        summary = f"method: {cfg.method}  images: {len(ids)}\nmetrics unavailable: {exc}\n"
    (out / "summary.txt").write_text(summary)
    return ids, preds, labels, report
