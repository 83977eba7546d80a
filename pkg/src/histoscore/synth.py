"""Seeded synthetic DAB-H tissue-core generator with exact ground truth.

Scenes are rendered through the same Beer-Lambert model the pipeline
inverts: every pixel gets a stain concentration vector, which is mapped to
optical density with the stain matrix and exponentiated back to 8-bit RGB.
Band strengths are specified as target luminances, so the stain intensity
description of a noise-free nucleus lands exactly on the requested value.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage as ndi

from .core import (
    HScore,
    IntensityFractions,
    MaskImage,
    RgbImage,
    ValidationError,
    h_score,
    write_mask,
    write_rgb,
)
from .stain import DAB_H, REC601, StainMatrix, complete_stain_matrix

log = logging.getLogger(__name__)

BANDS = ("unstained", "weak", "moderate", "strong")
MANIFEST_COLUMNS = (
    "path_rgb",
    "path_nuclei_mask",
    "path_tumour_mask",
    "wsn",
    "msn",
    "ssn",
    "unstained",
    "hscore",
)


class SceneInfeasibleError(ValidationError):
    pass


@dataclass(frozen=True)
class SynthSceneSpec:
    size: int = 64
    n_nuclei: int = 24
    radius_range: tuple[float, float] = (2.0, 2.8)
    tumour_radius_range: tuple[float, float] = (3.0, 3.8)
    # minor/major axis ratio range for the ellipses
    axis_ratio_range: tuple[float, float] = (0.75, 1.0)
    tumour_fraction: float = 0.5
    # proportions of tumour nuclei per band: unstained, weak, moderate, strong
    band_proportions: tuple[float, float, float, float] = (0.25, 0.25, 0.25, 0.25)
    # target luminance per band; unstained and non-tumour nuclei are hematoxylin
    band_luminance: tuple[float, float, float, float] = (120.0, 212.0, 127.0, 42.0)
    overlap_prob: float = 0.0
    # hematoxylin concentration of the stroma inside the core
    background_tint: float = 0.1
    core_radius_frac: float = 0.46
    noise_std: float = 2.0
    blur_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.size < 8:
            raise ValidationError("size must be >= 8")
        if self.n_nuclei < 0:
            raise ValidationError("n_nuclei must be >= 0")
        if min(self.radius_range + self.tumour_radius_range) < 2:
            raise ValidationError("nucleus radii must be >= 2 px")
        if self.radius_range[0] > self.radius_range[1] or self.tumour_radius_range[0] > self.tumour_radius_range[1]:
            raise ValidationError("radius ranges must be ordered (lo, hi)")
        if any(p < 0 for p in self.band_proportions) or abs(sum(self.band_proportions) - 1.0) > 1e-9:
            raise ValidationError("band proportions must be non-negative and sum to 1")
        if not 0 <= self.tumour_fraction <= 1:
            raise ValidationError("tumour_fraction must lie in [0, 1]")
        if not 0 <= self.overlap_prob <= 1:
            raise ValidationError("overlap_prob must lie in [0, 1]")


@dataclass(frozen=True)
class Nucleus:
    center: tuple[float, float]
    axes: tuple[float, float]
    angle: float
    tumour: bool
    band: int


@dataclass(frozen=True, eq=False)
class Scene:
    rgb: RgbImage
    nuclei_mask: MaskImage
    tumour_mask: MaskImage
    fractions: IntensityFractions
    hscore: HScore
    # per-pixel index into ``nuclei`` (+1), 0 for stroma/background
    instances: np.ndarray
    nuclei: tuple[Nucleus, ...]


def concentration_for_luminance(target: float, stain: np.ndarray, i0: float = 255.0) -> float:
    """Concentration of a single stain whose rendered luminance equals ``target``."""
    if not 0 < target <= i0:
        raise ValidationError(f"target luminance {target} outside (0, {i0}]")

    def lum(c):
        return float(REC601 @ (i0 * np.exp(-c * stain)))

    lo, hi = 0.0, 1.0
    while lum(hi) > target:
        hi *= 2
        if hi > 1e3:
            raise ValidationError(f"luminance {target} unreachable with this stain")
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if lum(mid) > target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def allocate_counts(proportions, n: int) -> np.ndarray:
    """Largest-remainder rounding of ``proportions * n`` to integers summing to n."""
    raw = np.asarray(proportions, dtype=np.float64) * n
    counts = np.floor(raw).astype(int)
    short = n - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:short]] += 1
    return counts


def _ellipse_mask(shape, nuc: Nucleus) -> np.ndarray:
    yy, xx = np.mgrid[0 : shape[0], 0 : shape[1]]
    cy, cx = nuc.center
    c, s = np.cos(nuc.angle), np.sin(nuc.angle)
    u = (xx - cx) * c + (yy - cy) * s
    v = -(xx - cx) * s + (yy - cy) * c
    return (u / nuc.axes[0]) ** 2 + (v / nuc.axes[1]) ** 2 <= 1.0


def _place(spec: SynthSceneSpec, radii: np.ndarray, rng: np.random.Generator) -> list[tuple[float, float]]:
    centre = (spec.size - 1) / 2.0
    core_r = spec.core_radius_frac * spec.size
    placed: list[tuple[float, float]] = []
    placed_r: list[float] = []
    for r in radii:
        reach = core_r - r - 1.0
        if reach <= 0:
            raise SceneInfeasibleError(f"nucleus radius {r:.1f} does not fit in the core")
        overlap = placed and rng.random() < spec.overlap_prob
        for _ in range(500):
            if overlap:
                j = int(rng.integers(len(placed)))
                d = (r + placed_r[j]) * rng.uniform(0.6, 0.9)
                phi = rng.uniform(0, 2 * np.pi)
                cy, cx = placed[j][0] + d * np.sin(phi), placed[j][1] + d * np.cos(phi)
                if np.hypot(cy - centre, cx - centre) > reach:
                    continue
                break
            rho = reach * np.sqrt(rng.random())
            phi = rng.uniform(0, 2 * np.pi)
            cy, cx = centre + rho * np.sin(phi), centre + rho * np.cos(phi)
            if all(np.hypot(cy - py, cx - px) >= r + pr + 1.5 for (py, px), pr in zip(placed, placed_r)):
                break
        else:
            raise SceneInfeasibleError(
                f"could not place {len(radii)} nuclei in a {spec.size}px core (placed {len(placed)})"
            )
        placed.append((cy, cx))
        placed_r.append(float(r))
    return placed


def generate_scene(spec: SynthSceneSpec, matrix: StainMatrix = DAB_H) -> Scene:
    if not matrix.is_complete:
        matrix = complete_stain_matrix(matrix)
    rng = np.random.default_rng(spec.seed)
    n = spec.n_nuclei
    n_tumour = int(round(spec.tumour_fraction * n))
    is_tumour = np.zeros(n, dtype=bool)
    is_tumour[:n_tumour] = True
    bands = np.zeros(n, dtype=int)
    band_counts = allocate_counts(spec.band_proportions, n_tumour)
    bands[:n_tumour] = rng.permutation(np.repeat(np.arange(4), band_counts))

    radii = np.where(
        is_tumour,
        rng.uniform(*spec.tumour_radius_range, size=n),
        rng.uniform(*spec.radius_range, size=n),
    )
    # big nuclei first packs more reliably
    order = np.argsort(-radii, kind="stable")
    centers = _place(spec, radii[order], rng)

    nuclei = []
    for slot, idx in enumerate(order):
        ratio = rng.uniform(*spec.axis_ratio_range)
        nuclei.append(
            Nucleus(
                center=centers[slot],
                axes=(float(radii[idx]), float(radii[idx] * ratio)),
                angle=float(rng.uniform(0, np.pi)),
                tumour=bool(is_tumour[idx]),
                band=int(bands[idx]),
            )
        )
    # draw in a random order so overlaps do not always favour small nuclei
    draw_order = rng.permutation(n)
    nuclei = tuple(nuclei[i] for i in draw_order)

    size = spec.size
    shape = (size, size)
    yy, xx = np.mgrid[0:size, 0:size]
    centre = (size - 1) / 2.0
    core = np.hypot(yy - centre, xx - centre) <= spec.core_radius_frac * size

    conc = np.zeros(shape + (3,))
    conc[core, 1] = spec.background_tint
    band_conc = [concentration_for_luminance(L, matrix.hem if b == 0 else matrix.dab) for b, L in enumerate(spec.band_luminance)]
    hem_conc = band_conc[0]

    instances = np.zeros(shape, dtype=np.int32)
    for k, nuc in enumerate(nuclei, start=1):
        pix = _ellipse_mask(shape, nuc)
        instances[pix] = k
        conc[pix] = 0.0
        if nuc.tumour and nuc.band > 0:
            conc[pix, 0] = band_conc[nuc.band]
        else:
            conc[pix, 1] = hem_conc

    od = conc @ matrix.rows
    rgb = 255.0 * np.exp(-od)
    if spec.blur_sigma > 0:
        rgb = ndi.gaussian_filter(rgb, sigma=(spec.blur_sigma, spec.blur_sigma, 0))
    if spec.noise_std > 0:
        rgb = rgb + rng.normal(0.0, spec.noise_std, size=rgb.shape)
    rgb = np.clip(np.rint(rgb), 0, 255).astype(np.uint8)

    owner_tumour = np.zeros(n + 1, dtype=bool)
    owner_tumour[1:] = [nuc.tumour for nuc in nuclei]
    nuclei_mask = MaskImage((instances > 0).astype(np.uint8))
    tumour_mask = MaskImage(owner_tumour[instances].astype(np.uint8))

    if n_tumour:
        fractions = IntensityFractions.from_counts(
            weak=band_counts[1], moderate=band_counts[2], strong=band_counts[3], unstained=band_counts[0]
        )
    else:
        fractions = IntensityFractions(0.0, 0.0, 0.0, 100.0)
    return Scene(
        rgb=RgbImage(rgb),
        nuclei_mask=nuclei_mask,
        tumour_mask=tumour_mask,
        fractions=fractions,
        hscore=h_score(fractions),
        instances=instances,
        nuclei=nuclei,
    )


# -- datasets ---------------------------------------------------------------


@dataclass(frozen=True)
class DatasetSpec:
    """Per-scene parameters are drawn from these ranges."""

    base: SynthSceneSpec = field(default_factory=SynthSceneSpec)
    n_nuclei_range: tuple[int, int] = (18, 26)
    tumour_fraction_range: tuple[float, float] = (0.4, 0.6)
    # "uniform" covers [0, 300] evenly; "imbalanced" is unimodal and skewed low
    score_distribution: str = "uniform"

    def __post_init__(self):
        if self.score_distribution not in ("uniform", "imbalanced"):
            raise ValidationError(f"unknown score distribution {self.score_distribution!r}")


def proportions_for_score(target: float, rng: np.random.Generator) -> np.ndarray:
    """Random band proportions whose expected H-Score equals ``target``.

    Mixes a binomial spread with the tightest two-band split; both have
    mean band value ``target / 100``.
    """
    m = float(np.clip(target, 0.0, 300.0)) / 100.0
    q = m / 3.0
    binom = np.array([(1 - q) ** 3, 3 * q * (1 - q) ** 2, 3 * q**2 * (1 - q), q**3])
    lo = min(int(np.floor(m)), 2)
    tight = np.zeros(4)
    tight[lo] = lo + 1 - m
    tight[lo + 1] = m - lo
    lam = rng.uniform()
    p = lam * binom + (1 - lam) * tight
    return p / p.sum()


def sample_score(dist: str, rng: np.random.Generator) -> float:
    if dist == "uniform":
        return float(rng.uniform(0.0, 300.0))
    return float(300.0 * rng.beta(2.0, 5.0))


def scene_spec_for(ds: DatasetSpec, rng: np.random.Generator) -> SynthSceneSpec:
    target = sample_score(ds.score_distribution, rng)
    return replace(
        ds.base,
        n_nuclei=int(rng.integers(ds.n_nuclei_range[0], ds.n_nuclei_range[1] + 1)),
        tumour_fraction=float(rng.uniform(*ds.tumour_fraction_range)),
        band_proportions=tuple(float(p) for p in proportions_for_score(target, rng)),
        seed=int(rng.integers(2**31 - 1)),
    )


@dataclass(frozen=True)
class ManifestRow:
    path_rgb: Path
    path_nuclei_mask: Path | None
    path_tumour_mask: Path | None
    hscore: float
    fractions: IntensityFractions | None = None

    @property
    def image_id(self) -> str:
        return Path(self.path_rgb).stem


def generate_dataset(n: int, ds: DatasetSpec, seed: int, out_dir, matrix: StainMatrix = DAB_H) -> list[ManifestRow]:
    """Render ``n`` scenes under ``out_dir`` and write ``manifest.csv``."""
    if n < 1:
        raise ValidationError("n must be >= 1")
    out_dir = Path(out_dir)
    for sub in ("rgb", "nuclei", "tumour"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)
    seeds = np.random.SeedSequence(seed).spawn(n)
    rows = []
    for i, ss in enumerate(seeds):
        scene_rng = np.random.default_rng(ss)
        for attempt in range(20):
            spec = scene_spec_for(ds, scene_rng)
            try:
                scene = generate_scene(spec, matrix)
                break
            except SceneInfeasibleError:
                log.debug("scene %d attempt %d infeasible, redrawing", i, attempt)
        else:
            raise SceneInfeasibleError(f"scene {i}: packing failed repeatedly")
        name = f"tma_{i:04d}.png"
        write_rgb(scene.rgb, out_dir / "rgb" / name)
        write_mask(scene.nuclei_mask, out_dir / "nuclei" / name)
        write_mask(scene.tumour_mask, out_dir / "tumour" / name)
        rows.append(
            ManifestRow(
                Path("rgb") / name,
                Path("nuclei") / name,
                Path("tumour") / name,
                scene.hscore.value,
                scene.fractions,
            )
        )
    write_manifest(rows, out_dir / "manifest.csv")
    return rows


def write_manifest(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for r in rows:
            f = r.fractions.as_tuple() if r.fractions is not None else ("",) * 4
            writer.writerow(
                [
                    Path(r.path_rgb).as_posix(),
                    Path(r.path_nuclei_mask).as_posix() if r.path_nuclei_mask else "",
                    Path(r.path_tumour_mask).as_posix() if r.path_tumour_mask else "",
                    *(repr(float(v)) if v != "" else "" for v in f),
                    repr(float(r.hscore)),
                ]
            )


def read_manifest(path) -> list[ManifestRow]:
    """Load a manifest; relative paths resolve against its directory."""
    path = Path(path)
    base = path.parent
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"path_rgb", "hscore"} - set(reader.fieldnames or ())
        if missing:
            raise ValidationError(f"{path}: missing columns {sorted(missing)}")
        for rec in reader:
            label = float(rec["hscore"])
            if not 0 <= label <= 300:
                raise ValidationError(f"{path}: label {label} outside [0, 300]")
            fractions = None
            if all(rec.get(k) not in (None, "") for k in ("wsn", "msn", "ssn", "unstained")):
                fractions = IntensityFractions(
                    float(rec["wsn"]), float(rec["msn"]), float(rec["ssn"]), float(rec["unstained"])
                )

            def resolve(key):
                value = rec.get(key) or ""
                return base / value if value else None

            rows.append(
                ManifestRow(resolve("path_rgb"), resolve("path_nuclei_mask"), resolve("path_tumour_mask"), label, fractions)
            )
    return rows
