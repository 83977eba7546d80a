import csv
import shutil
from dataclasses import dataclass

import numpy as np
import pytest

from histoscore.cli import main
from histoscore.config import dataclass_from_config, parse_bool, read_config
from histoscore.core import ValidationError, read_intensity, read_labels
from histoscore.pipeline import PipelineConfig, PipelineError, compute_features, run_pipeline
from histoscore.synth import read_manifest, write_manifest


@dataclass(frozen=True)
class _Opts:
    a: int = 1
    b: float = 0.5
    c: bool = False
    d: tuple[float, float] = (0.0, 1.0)
    e: str = "x"


def test_config_parsing(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("# comment\nA = 3\nb=0.25  # trailing\nc = yes\nd = 1.5, 2\nlamt.k = 2\nmax-shift-frac = 0.1\n")
    values = read_config(p)
    assert values["k_bins"] == "2" and values["max_shift_frac"] == "0.1"
    opts = dataclass_from_config(_Opts, {k: values[k] for k in "abcd"})
    assert opts == _Opts(3, 0.25, True, (1.5, 2.0), "x")


def test_config_rejects_unknown_keys():
    with pytest.raises(ValidationError):
        dataclass_from_config(_Opts, {"zzz": "1"})


def test_parse_bool():
    assert parse_bool("On") and not parse_bool("0")
    with pytest.raises(ValidationError):
        parse_bool("maybe")


def test_nap_pipeline_one_row_per_image(small_dataset, tmp_path):
    manifest, rows = small_dataset
    ids, preds, labels, report = run_pipeline(PipelineConfig(manifest, tmp_path / "out", method="nap"))
    with open(tmp_path / "out" / "predictions.csv") as fh:
        recs = list(csv.DictReader(fh))
    assert len(recs) == len(rows) == len(ids)
    assert (tmp_path / "out" / "summary.txt").exists()
    assert np.isfinite(report.mae) and np.isfinite(report.cc)


def test_nnp_pipeline_recovers_labels(small_dataset, tmp_path):
    manifest, _ = small_dataset
    _, preds, labels, _ = run_pipeline(PipelineConfig(manifest, tmp_path / "out", method="nnp"))
    assert np.max(np.abs(preds - labels)) <= 10.0


def test_missing_mask_aborts_in_segmentation(small_dataset, tmp_path):
    manifest, _ = small_dataset
    rows = read_manifest(manifest)
    broken = tmp_path / "broken"
    shutil.copytree(manifest.parent, broken)
    (broken / rows[3].path_tumour_mask.relative_to(manifest.parent)).unlink()
    with pytest.raises(PipelineError) as info:
        run_pipeline(PipelineConfig(broken / "manifest.csv", tmp_path / "out"))
    assert info.value.stage == "segmentation" and info.value.image_id == rows[3].image_id


def test_missing_rgb_aborts_in_load(tmp_path, small_dataset):
    manifest, _ = small_dataset
    row = read_manifest(manifest)[0]
    bad = type(row)(tmp_path / "gone.png", row.path_nuclei_mask, row.path_tumour_mask, row.hscore)
    with pytest.raises(PipelineError) as info:
        compute_features(bad)
    assert info.value.stage == "load"


def test_network_method_needs_model(tmp_path):
    with pytest.raises(ValidationError):
        PipelineConfig(tmp_path / "m.csv", tmp_path, method="ram_cnn")


def test_intermediates_saved(small_dataset, tmp_path):
    manifest, rows = small_dataset
    sub = tmp_path / "sub"
    shutil.copytree(manifest.parent, sub)
    write_manifest(read_manifest(sub / "manifest.csv")[:2], sub / "two.csv")
    run_pipeline(PipelineConfig(sub / "two.csv", tmp_path / "out", save_intermediates=True))
    saved = sorted(p.name for p in (tmp_path / "out" / "intermediates").iterdir())
    assert len(saved) == 10 and any(n.endswith("_siti.png") for n in saved)


# -- command line -----------------------------------------------------------


def test_cli_synth_and_score(tmp_path, capsys):
    out = tmp_path / "ds"
    assert main(["--seed", "3", "synth", "--n", "3", "--out", str(out)]) == 0
    rows = read_manifest(out / "manifest.csv")
    assert len(rows) == 3
    res = tmp_path / "score.csv"
    code = main(["score", "--in", str(rows[0].path_rgb), "--mask", str(rows[0].path_tumour_mask), "--method", "nnp",
                 "--out", str(res)])
    assert code == 0
    with open(res) as fh:
        rec = next(csv.DictReader(fh))
    assert abs(float(rec["hscore"]) - rows[0].hscore) <= 10


def test_cli_intensity_and_segment(tmp_path, small_dataset):
    manifest, _ = small_dataset
    row = read_manifest(manifest)[0]
    inten = tmp_path / "i.png"
    assert main(["intensity", "--in", str(row.path_rgb), "--out", str(inten)]) == 0
    assert read_intensity(inten).shape == (64, 64)
    labels = tmp_path / "l.png"
    assert main(["segment", "--in", str(inten), "--mask", str(row.path_tumour_mask), "--out", str(labels)]) == 0
    assert read_labels(labels).count > 0


def test_cli_deconvolve_raw(tmp_path, small_dataset):
    manifest, _ = small_dataset
    row = read_manifest(manifest)[0]
    raw = tmp_path / "dab.f32"
    assert main(["deconvolve", "--in", str(row.path_rgb), "--out-dab", str(raw)]) == 0
    assert np.fromfile(raw, dtype="<f4").size == 64 * 64


def test_cli_train_predict_evaluate(tmp_path, small_dataset, capsys):
    manifest, rows = small_dataset
    ckpt = tmp_path / "m.hscn"
    assert main(["train", "--data", str(manifest), "--epochs", "1", "--out", str(ckpt)]) == 0
    capsys.readouterr()
    assert main(["predict", "--model", str(ckpt), "--manifest", str(manifest)]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == len(rows)
    preds = tmp_path / "p.csv"
    preds.write_text("prediction,label\n" + "".join(f"{l.split(',')[1]},{r.hscore}\n" for l, r in zip(lines, rows)))
    assert main(["evaluate", "--predictions", str(preds), "--groups", str(tmp_path / "g.csv")]) == 0
    assert "MAE" in capsys.readouterr().out


def test_cli_pipeline_config_file(tmp_path, small_dataset):
    manifest, rows = small_dataset
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"manifest = {manifest}\nout_dir = {tmp_path / 'res'}\nmethod = nnp\nseg.h_depth = 1.0\n")
    assert main(["--config", str(cfg), "pipeline"]) == 0
    assert len((tmp_path / "res" / "predictions.csv").read_text().splitlines()) == len(rows) + 1


def test_cli_config_unknown_key(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("not_an_option = 1\n")
    with pytest.raises(SystemExit):
        main(["--config", str(cfg), "pipeline"])


def test_cli_error_exit_code(tmp_path, capsys):
    assert main(["score", "--in", str(tmp_path / "missing.png")]) == 2
    assert "error" in capsys.readouterr().err


def test_cli_mask_networks_widths(tmp_path, small_dataset):
    from histoscore.nn import load_model

    manifest, _ = small_dataset
    for target, width in (("nuclei", 8), ("tumour", 4)):
        ckpt = tmp_path / f"{target}.hscn"
        code = main(["train", "--arch", "mini_unet", "--target", target, "--data", str(manifest), "--limit", "4",
                     "--epochs", "1", "--out", str(ckpt)])
        assert code == 0
        assert load_model(ckpt).spec.unet_filters == width


def test_pipeline_with_mask_networks(tmp_path, small_dataset):
    from histoscore.nn import load_model

    manifest, rows = small_dataset
    ckpt = tmp_path / "n.hscn"
    assert main(["train", "--arch", "mini_unet", "--data", str(manifest), "--limit", "4", "--epochs", "1",
                 "--out", str(ckpt)]) == 0
    out = tmp_path / "res"
    code = main(["pipeline", "--manifest", str(manifest), "--out-dir", str(out), "--nuclei-model", str(ckpt)])
    assert code == 0
    assert len((out / "predictions.csv").read_text().splitlines()) == len(rows) + 1
