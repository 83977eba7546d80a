"""``histoscore`` command line."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from .config import dataclass_from_config, parse_bool, read_config

log = logging.getLogger("histoscore")


def _matrix(args):
    from .stain import DAB_H, StainMatrix

    return StainMatrix.from_file(args.matrix) if getattr(args, "matrix", None) else DAB_H


def _lamt_params(args):
    from .lamt import LamtParams

    return LamtParams(k_bins=args.k_bins, seed=args.seed)


def _watershed(args):
    from .segmentation import WatershedParams

    base = WatershedParams(min_area=args.min_area, h_depth=args.h_depth, opening_radius=args.opening_radius)
    if getattr(args, "params", None):
        base = dataclass_from_config(WatershedParams, read_config(args.params), base)
    return base


def _thresholds(args):
    from .baseline import IntensityThresholds

    base = IntensityThresholds(args.b1, args.b2, args.b3)
    if getattr(args, "thresholds", None):
        base = dataclass_from_config(IntensityThresholds, read_config(args.thresholds), base)
    return base


def _hyperparams(args, arch):
    from .augment import DlaConfig
    from .nn import Hyperparams
    from .pipeline import input_fill, input_order

    return Hyperparams(
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        dla=DlaConfig(sigma=args.sigma, samples_per_image=args.dla_samples) if args.dla else None,
        augment=args.augment,
        max_shift_frac=args.max_shift_frac,
        fill=input_fill(arch),
        order=input_order(arch),
    )


# -- subcommands ----------------------------------------------------------------


def cmd_deconvolve(args):
    from .core import read_rgb
    from .stain import separate

    channels, lum = separate(read_rgb(args.input), _matrix(args))
    if not (args.out_dab or args.out_dir):
        raise SystemExit("deconvolve needs --out-dab and/or --out-dir")
    if args.out_dab:
        # raw little-endian float32, row-major, height x width
        np.asarray(channels.dab, dtype="<f4").tofile(args.out_dab)
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        stem = Path(args.input).stem
        for name in ("dab", "hem", "residual"):
            np.save(out / f"{stem}_{name}.npy", getattr(channels, name))
        np.save(out / f"{stem}_luminance.npy", lum.data)
    print(f"negative concentration fraction: {channels.negative_fraction:.4f}")


def cmd_intensity(args):
    from .core import read_rgb, write_intensity, write_mask, MaskImage
    from .lamt import classify_stain, intensity_description
    from .stain import separate

    channels, lum = separate(read_rgb(args.input), _matrix(args))
    cls = classify_stain(channels, lum, params=_lamt_params(args))
    write_intensity(intensity_description(lum, cls), args.out)
    if args.classes:
        write_mask(MaskImage(cls.positive.astype(np.uint8)), args.classes)
    print(f"positive pixels: {int(cls.positive.sum())} of {cls.positive.size}")


def cmd_segment(args):
    from .core import read_intensity, write_labels
    from .lamt import build_region_image
    from .segmentation import load_mask, seeded_watershed, segment_nuclei

    intensity = read_intensity(args.intensity)
    params = _watershed(args)
    if args.mask:
        mask = load_mask(args.mask)
        labels = seeded_watershed(mask, build_region_image(intensity, mask), params)
    else:
        labels = segment_nuclei(intensity, params)
    write_labels(labels, args.out)
    print(f"nuclei: {labels.count}")


def _intensity_from_rgb(path, args):
    from .core import read_rgb
    from .lamt import classify_stain, intensity_description
    from .stain import separate

    channels, lum = separate(read_rgb(path), _matrix(args))
    return intensity_description(lum, classify_stain(channels, lum, params=_lamt_params(args))), lum


def cmd_score(args):
    from .baseline import nap_score, nnp_score
    from .core import MaskImage, read_intensity
    from .lamt import build_region_image
    from .segmentation import load_mask, seeded_watershed, threshold_foreground

    if bool(args.input) == bool(args.intensity):
        raise SystemExit("score needs exactly one of --in (RGB image) or --intensity")
    if args.input:
        intensity, lum = _intensity_from_rgb(args.input, args)
        source = args.input
    else:
        intensity, lum = read_intensity(args.intensity), None
        source = args.intensity
    if args.mask:
        mask = load_mask(args.mask)
    elif lum is not None:
        # all tissue: anything darker than near-white glass
        mask = MaskImage((lum.data <= 250.0).astype(np.uint8))
    else:
        mask = threshold_foreground(intensity, _watershed(args))
    if args.method == "nap":
        score, fr = nap_score(intensity, mask, _thresholds(args))
    else:
        labels = seeded_watershed(mask, build_region_image(intensity, mask), _watershed(args))
        score, fr = nnp_score(labels, intensity, _thresholds(args))
    row = [Path(source).stem, args.method, f"{fr.wsn:.4f}", f"{fr.msn:.4f}", f"{fr.ssn:.4f}",
           f"{fr.unstained:.4f}", f"{score.value:.4f}"]
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["image", "method", "wsn", "msn", "ssn", "unstained", "hscore"])
            w.writerow(row)
    print(f"hscore {score.value:.4f}")
    print(f"weak {fr.wsn:.4f}  moderate {fr.msn:.4f}  strong {fr.ssn:.4f}  unstained {fr.unstained:.4f}")


def cmd_synth(args):
    from dataclasses import replace

    from .synth import DatasetSpec, SynthSceneSpec, generate_dataset

    ds = DatasetSpec(score_distribution=args.distribution)
    base = replace(ds.base, size=args.size)
    if args.spec:
        values = read_config(args.spec)
        ds_keys = {"n_nuclei_range", "tumour_fraction_range", "score_distribution"}
        ds = dataclass_from_config(DatasetSpec, {k: v for k, v in values.items() if k in ds_keys}, ds)
        base = dataclass_from_config(SynthSceneSpec, {k: v for k, v in values.items() if k not in ds_keys}, base)
    ds = replace(ds, base=base)
    rows = generate_dataset(args.n, ds, args.seed, args.out, _matrix(args))
    print(f"wrote {len(rows)} scenes and {Path(args.out) / 'manifest.csv'}")


def _load_dataset(args, arch):
    from .nn import Dataset
    from .pipeline import FeatureConfig, load_features, network_inputs
    from .synth import read_manifest

    rows = read_manifest(args.data)
    if args.limit:
        rows = rows[: args.limit]
    feats = load_features(rows, FeatureConfig(matrix=_matrix(args), lamt=_lamt_params(args)))
    if arch == "mini_unet":
        x = np.stack([f.intensity.data for f in feats])[:, None].astype(np.float32)
        key = "nuclei_mask" if args.target == "nuclei" else "tumour_mask"
        y = np.stack([getattr(f, key).data for f in feats])[:, None].astype(np.float32)
        return Dataset([x], y), feats
    return Dataset(network_inputs(feats, arch), np.array([r.hscore for r in rows])), feats


def _spec(args, res):
    from .nn import build_network
    from .nn.network import UNET_FILTERS

    if args.arch == "mini_unet":
        return build_network("mini_unet", args.scale or 1, res, unet_filters=UNET_FILTERS[args.target])
    return build_network(args.arch, args.scale or 8, res)


def cmd_train(args):
    from .nn import save_model, train

    data, feats = _load_dataset(args, args.arch)
    res = feats[0].intensity.shape[0]
    spec = _spec(args, res)
    model = train(spec, data, _hyperparams(args, args.arch), seed=args.seed)
    save_model(model, args.out)
    tail = model.loss_curve[-10:]
    print(f"trained {args.arch} on {len(data)} images; final loss {np.mean(tail):.4f}; saved {args.out}")


def cmd_predict(args):
    from .core import read_intensity, read_rgb
    from .nn import load_model
    from .pipeline import FeatureConfig, load_features, network_inputs
    from .synth import read_manifest

    model = load_model(args.model)
    arch = model.spec.arch
    if args.manifest:
        rows = read_manifest(args.manifest)
        feats = load_features(rows, FeatureConfig(matrix=_matrix(args), lamt=_lamt_params(args)))
        preds = model.predict(network_inputs(feats, arch))
        for f, p in zip(feats, preds):
            print(f"{f.image_id},{p:.4f}")
        return
    if arch == "rgb_cnn":
        if not args.rgb:
            raise SystemExit("rgb_cnn needs --rgb")
        inputs = [read_rgb(args.rgb).data.transpose(2, 0, 1)[None].astype(np.float32) / 255.0]
    else:
        if not (args.sini and args.siti):
            raise SystemExit(f"{arch} needs --sini and --siti")
        sini, siti = read_intensity(args.sini).data, read_intensity(args.siti).data
        if arch == "ram_cnn":
            inputs = [sini[None, None], siti[None, None]]
        else:
            inputs = [np.stack([sini, siti])[None]]
    print(f"{float(model.predict(inputs)[0]):.4f}")


def cmd_evaluate(args):
    from .evaluation import evaluate, format_report, write_group_csv

    preds, labels = [], []
    with open(args.predictions, newline="") as fh:
        for rec in csv.DictReader(fh):
            preds.append(float(rec["prediction"]))
            labels.append(float(rec["label"]))
    report = evaluate(preds, labels, sd_of=args.sd_of)
    print(format_report(report), end="")
    if args.groups:
        write_group_csv(report.groups, args.groups)


def cmd_cv(args):
    from .evaluation import cross_validate, format_report, write_group_csv, write_scatter

    data, feats = _load_dataset(args, args.arch)
    spec = _spec(args, feats[0].intensity.shape[0])
    result = cross_validate(data, spec, _hyperparams(args, args.arch), args.seed, args.fold_size, args.threads)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ids = [f.image_id for f in feats]
    with open(out / "cv_predictions.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image_id", "fold", "prediction", "label"])
        for k, fold in enumerate(result.folds):
            for i, p, l in zip(fold.test_idx, fold.preds, fold.labels):
                w.writerow([ids[i], k, f"{p:.4f}", f"{l:.4f}"])
    write_scatter(result.preds, result.labels, out / "scatter.csv")
    write_group_csv(result.pooled.groups, out / "groups.csv")
    summary = format_report(result.pooled, title=f"{args.arch} leave-{args.fold_size}-out, {len(result.folds)} folds")
    (out / "summary.txt").write_text(summary)
    print(summary, end="")


def cmd_pipeline(args):
    from .evaluation import format_report
    from .nn import load_model
    from .pipeline import FeatureConfig, PipelineConfig, run_pipeline

    if not args.manifest or not args.out_dir:
        raise SystemExit("pipeline needs manifest and out_dir (flags or config keys)")
    features = FeatureConfig(
        matrix=_matrix(args),
        lamt=_lamt_params(args),
        nuclei_model=load_model(args.nuclei_model) if args.nuclei_model else None,
        tumour_model=load_model(args.tumour_model) if args.tumour_model else None,
    )
    cfg = PipelineConfig(
        manifest=Path(args.manifest),
        out_dir=Path(args.out_dir),
        method=args.method,
        model=Path(args.model) if args.model else None,
        features=features,
        thresholds=_thresholds(args),
        watershed=_watershed(args),
        save_intermediates=args.save_intermediates,
    )
    ids, _, _, report = run_pipeline(cfg)
    print(f"scored {len(ids)} images -> {Path(args.out_dir) / 'predictions.csv'}")
    if report is not None:
        print(format_report(report), end="")


# -- parser ---------------------------------------------------------------------


def _add_seed(p):
    # also accepted after the subcommand; the global flag is the default
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS)


def _add_stain(p):
    p.add_argument("--matrix", "--stain-matrix", dest="matrix",
                   help="stain matrix file: nine reals, rows DAB, hematoxylin, residual")
    p.add_argument("--k-bins", "--k", dest="k_bins", type=int, default=4,
                   help="luminance bins for adaptive thresholding")


def _add_bands(p):
    p.add_argument("--b1", type=float, default=85.0, help="strong/moderate boundary on the 0-510 scale")
    p.add_argument("--b2", type=float, default=170.0, help="moderate/weak boundary")
    p.add_argument("--b3", type=float, default=255.0, help="weak/unstained boundary")
    p.add_argument("--thresholds", help="key = value file with b1, b2, b3")


def _add_watershed(p):
    p.add_argument("--h-depth", type=float, default=1.0, help="marker depth on the distance transform, pixels")
    p.add_argument("--min-area", type=int, default=4)
    p.add_argument("--opening-radius", type=int, default=0)
    p.add_argument("--params", help="key = value file of watershed settings")


def _add_training(p, archs):
    p.add_argument("--arch", choices=archs, default="ram_cnn")
    p.add_argument("--scale", type=int, default=0,
                   help="divide every filter count and width by this (default 8, or 1 for mini_unet)")
    p.add_argument("--data", required=True, help="manifest.csv")
    p.add_argument("--limit", type=int, default=0, help="use only the first N manifest rows")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--sigma", type=float, default=0.9, help="label-spread standard deviation")
    p.add_argument("--dla-samples", type=int, default=50, help="augmented labels per image")
    p.add_argument("--dla", type=parse_bool, default=True, help="label augmentation on/off")
    p.add_argument("--augment", type=parse_bool, default=True, help="rotation/shift augmentation on/off")
    p.add_argument("--max-shift-frac", type=float, default=0.05)
    p.add_argument("--target", choices=("nuclei", "tumour"), default="nuclei", help="mask for mini_unet")
    _add_stain(p)
    _add_seed(p)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="histoscore", description="IHC H-Score estimation from TMA images.")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--threads", type=int, default=1, help="worker processes for cross-validation folds")
    parser.add_argument("--config", help="flat key = value file; keys are long option names")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("deconvolve", help="stain concentrations of one RGB image")
    p.add_argument("--in", "--input", dest="input", required=True)
    p.add_argument("--out-dab", help="DAB concentrations as raw little-endian float32")
    p.add_argument("--out-dir", help="all channels and luminance as .npy")
    _add_stain(p)
    p.set_defaults(func=cmd_deconvolve)

    p = sub.add_parser("intensity", help="stain intensity description image (16-bit PNG)")
    p.add_argument("--in", "--input", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--classes", help="also write the positive-stain map")
    _add_stain(p)
    _add_seed(p)
    p.set_defaults(func=cmd_intensity)

    p = sub.add_parser("segment", help="watershed nucleus instances")
    p.add_argument("--in", "--intensity", dest="intensity", required=True)
    p.add_argument("--mask", help="restrict to this binary mask")
    p.add_argument("--out", required=True)
    _add_watershed(p)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("score", help="NAP or NNP baseline H-Score of one image")
    p.add_argument("--in", "--input", dest="input", help="RGB image")
    p.add_argument("--intensity", help="precomputed intensity image instead of --in")
    p.add_argument("--mask", help="tissue mask; default all tissue (luminance <= 250)")
    p.add_argument("--method", choices=("nap", "nnp"), default="nap")
    p.add_argument("--out", help="result CSV")
    _add_stain(p)
    _add_bands(p)
    _add_watershed(p)
    _add_seed(p)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("synth", help="generate a synthetic TMA dataset")
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--distribution", choices=("uniform", "imbalanced"), default="uniform")
    p.add_argument("--spec", help="key = value file of scene and dataset settings")
    p.add_argument("--out", required=True)
    p.add_argument("--matrix", "--stain-matrix", dest="matrix")
    _add_seed(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a network and write a checkpoint")
    _add_training(p, ("rgb_cnn", "ra_cnn", "ram_cnn", "mini_unet"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="score images with a checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--sini")
    p.add_argument("--siti")
    p.add_argument("--rgb")
    p.add_argument("--manifest", help="score every row; prints image_id,prediction")
    _add_stain(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="metrics from a CSV with prediction and label columns")
    p.add_argument("--predictions", required=True)
    p.add_argument("--sd-of", choices=("absolute", "signed"), default="absolute")
    p.add_argument("--groups", help="write the score-group table here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("cv", help="leave-k-out cross-validation")
    _add_training(p, ("rgb_cnn", "ra_cnn", "ram_cnn"))
    p.add_argument("--fold-size", type=int, default=5)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("pipeline", help="score a manifest end to end")
    p.add_argument("--manifest")
    p.add_argument("--out-dir")
    p.add_argument("--method", choices=("nap", "nnp", "rgb_cnn", "ra_cnn", "ram_cnn"), default="nap")
    p.add_argument("--model", help="scoring network checkpoint")
    p.add_argument("--nuclei-model", help="mask network replacing manifest nuclei masks")
    p.add_argument("--tumour-model", help="mask network replacing manifest tumour masks")
    p.add_argument("--save-intermediates", type=parse_bool, default=False)
    _add_stain(p)
    _add_bands(p)
    _add_watershed(p)
    p.set_defaults(func=cmd_pipeline)
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> None:
    """Config values become defaults, so explicit flags still win."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known_pre, rest = pre.parse_known_args(argv)
    if not known_pre.config:
        return
    commands = parser._subparsers._group_actions[0].choices
    command = next((tok for tok in rest if tok in commands), None)
    if command is None:
        return
    values = read_config(known_pre.config)
    sub = commands[command]
    top_dests = {a.dest for a in parser._actions}
    unknown = sorted(set(values) - top_dests - {a.dest for a in sub._actions})
    if unknown:
        raise SystemExit(f"{known_pre.config}: unknown keys for '{command}': {', '.join(unknown)}")
    # argparse converts string defaults with the option's type
    parser.set_defaults(**{k: v for k, v in values.items() if k in top_dests})
    sub.set_defaults(**{k: v for k, v in values.items() if k not in top_dests})
    for action in sub._actions:
        if action.dest in values:
            action.required = False


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    _apply_config(parser, argv)
    args = parser.parse_args(argv)
    for k in ("seed", "threads"):
        setattr(args, k, int(getattr(args, k)))
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s"
    )
    from .pipeline import PipelineError

    try:
        args.func(args)
    # bad inputs, unreadable files and corrupt checkpoints are all ValueErrors
    except (PipelineError, ValueError, OSError) as exc:
        print(f"histoscore: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
