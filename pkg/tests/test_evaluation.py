import numpy as np
import pytest
from scipy import stats

from histoscore.core import ValidationError
from histoscore.evaluation import (
    GROUP_NAMES,
    MetricError,
    betainc_regularized,
    cross_validate,
    evaluate,
    format_report,
    group_report,
    make_folds,
    pearson,
    write_group_csv,
    write_scatter,
)
from histoscore.nn.network import build_network
from histoscore.nn.train import Dataset, Hyperparams


def test_perfect_predictions(rng):
    y = rng.uniform(0, 300, 20)
    r = evaluate(y, y)
    assert r.mae == 0.0 and r.cc == pytest.approx(1.0)


def test_constant_shift(rng):
    y = rng.uniform(0, 280, 20)
    r = evaluate(y + 10, y)
    assert r.mae == pytest.approx(10.0) and r.cc == pytest.approx(1.0)
    assert r.sd == pytest.approx(0.0, abs=1e-12)


def test_five_pair_example_mae_and_pearson_closed_form():
    preds = [1, 2, 3, 4, 5]
    labels = [2, 1, 4, 3, 6]
    r = evaluate(preds, labels)
    assert r.mae == 1.0
    # sxy = 10, sxx = 10, syy = 14.8
    assert r.cc == pytest.approx(10 / np.sqrt(148), abs=1e-12)


def test_sd_of_absolute_and_signed():
    preds = np.array([1.0, 4.0, 2.0, 9.0])
    labels = np.array([2.0, 2.0, 3.0, 5.0])
    err = preds - labels
    assert evaluate(preds, labels).sd == pytest.approx(np.std(np.abs(err), ddof=1))
    assert evaluate(preds, labels, sd_of="signed").sd == pytest.approx(np.std(err, ddof=1))
    with pytest.raises(ValidationError):
        evaluate(preds, labels, sd_of="median")


@pytest.mark.parametrize("n", [3, 5, 12, 40, 200])
def test_pearson_matches_reference(n):
    r = np.random.default_rng(n)
    x = r.normal(size=n)
    y = 0.3 * x + r.normal(size=n)
    cc, p = pearson(x, y)
    ref = stats.pearsonr(x, y)
    assert cc == pytest.approx(ref.statistic, abs=1e-12)
    assert p == pytest.approx(ref.pvalue, rel=1e-8, abs=1e-12)


@pytest.mark.parametrize("a, b, x", [(0.5, 0.5, 0.3), (2.0, 5.0, 0.9), (50.0, 0.5, 0.999), (1.0, 1.0, 0.42)])
def test_incomplete_beta_matches_reference(a, b, x):
    from scipy.special import betainc

    assert betainc_regularized(a, b, x) == pytest.approx(betainc(a, b, x), rel=1e-10)


def test_symmetric_under_pair_permutation(rng):
    p, l = rng.uniform(0, 300, 30), rng.uniform(0, 300, 30)
    perm = rng.permutation(30)
    a, b = evaluate(p, l), evaluate(p[perm], l[perm])
    assert a.mae == pytest.approx(b.mae, abs=1e-12)
    assert a.sd == pytest.approx(b.sd, abs=1e-12)
    assert a.cc == pytest.approx(b.cc, abs=1e-12)
    assert a.groups == b.groups


def test_pearson_affine_invariance(rng):
    x, y = rng.uniform(0, 300, 25), rng.uniform(0, 300, 25)
    base = pearson(x, y)[0]
    assert abs(pearson(3.7 * x + 12.0, y)[0] - base) <= 1e-12
    assert abs(pearson(x, 0.25 * y - 40.0)[0] - base) <= 1e-12


def test_metric_errors():
    with pytest.raises(MetricError):
        evaluate([1.0, 2.0], [1.0, 3.0])
    with pytest.raises(MetricError):
        evaluate([5.0, 5.0, 5.0], [1.0, 2.0, 3.0])
    with pytest.raises(MetricError):
        evaluate([], [])
    with pytest.raises(MetricError):
        evaluate([1.0, 2.0, 3.0], [1.0, 2.0])


def test_group_report_examples():
    rows = group_report([35.0], [30.0])
    assert rows[0].group == "0-49" and (rows[0].lt10, rows[0].mid, rows[0].gt30) == (1, 0, 0)
    rows = group_report([200.0], [260.0])
    assert rows[5].group == "250-300" and rows[5].gt30 == 1
    assert [r.group for r in rows] == list(GROUP_NAMES)
    assert sum(r.total for r in rows) == 1


def test_group_edges():
    rows = group_report([50.0, 300.0, 70.0, 0.0], [50.0, 300.0, 40.0, 0.0])
    assert rows[1].lt10 == 1 and rows[5].lt10 == 1
    assert rows[0].mid == 1 and rows[0].lt10 == 1


def test_group_counts_sum_to_n(rng):
    p, l = rng.uniform(0, 300, 77), rng.uniform(0, 300, 77)
    assert sum(g.total for g in evaluate(p, l).groups) == 77


def test_report_files(tmp_path, rng):
    p, l = rng.uniform(0, 300, 10), rng.uniform(0, 300, 10)
    r = evaluate(p, l)
    text = format_report(r, "demo")
    assert "MAE" in text and "250-300" in text
    write_scatter(p, l, tmp_path / "s.csv")
    write_group_csv(r.groups, tmp_path / "g.csv")
    assert len((tmp_path / "s.csv").read_text().splitlines()) == 11
    assert len((tmp_path / "g.csv").read_text().splitlines()) == 7


def test_fold_geometry_105():
    folds = make_folds(105, seed=0)
    assert len(folds) == 21 and all(f.size == 5 for f in folds)


def test_fold_geometry_remainder():
    assert [f.size for f in make_folds(12, seed=0)] == [5, 5, 2]


def test_folds_partition_and_reproduce():
    a = make_folds(57, seed=3)
    b = make_folds(57, seed=3)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    allidx = np.concatenate(a)
    assert allidx.size == 57 and np.array_equal(np.sort(allidx), np.arange(57))
    assert any(not np.array_equal(x, y) for x, y in zip(a, make_folds(57, seed=4)))


def test_cross_validate_small(rng):
    n = 12
    x = rng.random((n, 1, 16, 16)).astype(np.float32)
    data = Dataset([x, x], rng.uniform(0, 300, n))
    cv = cross_validate(data, build_network("ram_cnn", 8, 16), Hyperparams(epochs=1, batch_size=4), seed=1)
    assert [f.test_idx.size for f in cv.folds] == [5, 5, 2]
    assert cv.folds[-1].report is None
    assert cv.pooled.n == n
    assert np.all((cv.preds >= 0) & (cv.preds <= 300))


def test_cross_validate_needs_ten(rng):
    data = Dataset([np.zeros((9, 1, 16, 16))] * 2, np.zeros(9))
    with pytest.raises(ValidationError):
        cross_validate(data, build_network("ram_cnn", 8, 16), Hyperparams(epochs=1))
