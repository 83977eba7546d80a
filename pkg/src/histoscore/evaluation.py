"""Agreement metrics, score-group tables and leave-k-out cross-validation."""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .core import ValidationError

log = logging.getLogger(__name__)

GROUP_EDGES = (0, 50, 100, 150, 200, 250, 300)
GROUP_NAMES = ("0-49", "50-99", "100-149", "150-199", "200-249", "250-300")
BUCKET_NAMES = ("ae<10", "10<=ae<=30", "ae>30")


class MetricError(ValueError):
    """A statistic is undefined for the given sample."""


# -- incomplete beta / Student t ------------------------------------------------


def _beta_cf(a: float, b: float, x: float, max_iter: int = 500, eps: float = 1e-15) -> float:
    """Continued fraction for the incomplete beta, modified Lentz evaluation."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise ArithmeticError(f"incomplete beta did not converge for a={a}, b={b}, x={x}")


def betainc_regularized(a: float, b: float, x: float) -> float:
    """I_x(a, b) for a, b > 0 and x in [0, 1]."""
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    log_front = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    # the fraction converges fast on the side below the mean
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(log_front) * _beta_cf(a, b, x) / a
    return 1.0 - math.exp(log_front) * _beta_cf(b, a, 1.0 - x) / b


def t_two_sided_p(t: float, df: int) -> float:
    """P(|T| >= |t|) for Student's t with ``df`` degrees of freedom."""
    if df <= 0:
        raise MetricError("t-test needs at least one degree of freedom")
    if math.isinf(t):
        return 0.0
    return betainc_regularized(df / 2.0, 0.5, df / (df + t * t))


def pearson(x, y) -> tuple[float, float]:
    """Pearson correlation and its two-sided p-value (t-test, n - 2 dof)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = x.size
    if n != y.size:
        raise MetricError("inputs differ in length")
    if n < 3:
        raise MetricError(f"p-value undefined for n = {n} < 3")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise MetricError("correlation undefined for zero-variance input")
    r = float(np.clip((dx @ dy) / math.sqrt(sxx * syy), -1.0, 1.0))
    df = n - 2
    t = math.inf if abs(r) == 1.0 else r * math.sqrt(df / (1.0 - r * r))
    return r, t_two_sided_p(t, df)


# -- reports --------------------------------------------------------------------


@dataclass(frozen=True)
class GroupRow:
    group: str
    lt10: int
    mid: int
    gt30: int

    @property
    def total(self) -> int:
        return self.lt10 + self.mid + self.gt30


@dataclass(frozen=True)
class EvalReport:
    n: int
    mae: float
    sd: float
    cc: float
    p_value: float
    groups: tuple[GroupRow, ...]
    sd_of: str = "absolute"


def score_group(label: float) -> int:
    """Index into GROUP_NAMES; 300 falls in the last group."""
    return min(int(np.searchsorted(GROUP_EDGES, label, side="right")) - 1, len(GROUP_NAMES) - 1)


def group_report(preds, labels) -> tuple[GroupRow, ...]:
    """Absolute-error buckets per score group, grouped by the reference label."""
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if preds.size == 0 or preds.shape != labels.shape:
        raise MetricError("need equal nonempty prediction and label arrays")
    counts = np.zeros((len(GROUP_NAMES), 3), dtype=int)
    for p, l in zip(preds, labels):
        ae = abs(p - l)
        bucket = 0 if ae < 10 else (1 if ae <= 30 else 2)
        counts[max(score_group(l), 0), bucket] += 1
    return tuple(GroupRow(name, *map(int, row)) for name, row in zip(GROUP_NAMES, counts))


def evaluate(preds, labels, sd_of: str = "absolute") -> EvalReport:
    """MAE, SD of errors, Pearson CC and p-value, plus the score-group table.

    ``sd_of`` selects the standard deviation (n - 1 denominator) of the
    absolute errors or of the signed errors.
    """
    preds = np.asarray(preds, dtype=np.float64).ravel()
    labels = np.asarray(labels, dtype=np.float64).ravel()
    if preds.size != labels.size or preds.size == 0:
        raise MetricError("need equal nonempty prediction and label arrays")
    if sd_of not in ("absolute", "signed"):
        raise ValidationError("sd_of must be 'absolute' or 'signed'")
    err = preds - labels
    cc, p = pearson(preds, labels)
    spread = np.abs(err) if sd_of == "absolute" else err
    return EvalReport(
        n=int(preds.size),
        mae=float(np.mean(np.abs(err))),
        sd=float(np.std(spread, ddof=1)),
        cc=cc,
        p_value=p,
        groups=group_report(preds, labels),
        sd_of=sd_of,
    )


def format_report(report: EvalReport, title: str = "") -> str:
    lines = [title] if title else []
    lines += [
        f"n        {report.n}",
        f"MAE      {report.mae:.4f}",
        f"SD       {report.sd:.4f}  ({report.sd_of} errors)",
        f"CC       {report.cc:.6f}",
        f"p-value  {report.p_value:.3e}",
        "",
        f"{'group':<10}" + "".join(f"{b:>12}" for b in BUCKET_NAMES),
    ]
    for g in report.groups:
        lines.append(f"{g.group:<10}{g.lt10:>12}{g.mid:>12}{g.gt30:>12}")
    return "\n".join(lines) + "\n"


def write_scatter(preds, labels, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["prediction", "label"])
        for p, l in zip(preds, labels):
            w.writerow([f"{float(p):.4f}", f"{float(l):.4f}"])


def write_group_csv(groups, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["group", *BUCKET_NAMES])
        for g in groups:
            w.writerow([g.group, g.lt10, g.mid, g.gt30])


# -- cross-validation -----------------------------------------------------------


def make_folds(n: int, seed: int, fold_size: int = 5) -> list[np.ndarray]:
    """Random disjoint held-out sets of ``fold_size``; the last may be smaller."""
    if n < 1 or fold_size < 1:
        raise ValidationError("need n >= 1 and fold_size >= 1")
    perm = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0]).permutation(n)
    return [np.sort(perm[i : i + fold_size]) for i in range(0, n, fold_size)]


@dataclass
class FoldResult:
    test_idx: np.ndarray
    preds: np.ndarray
    labels: np.ndarray
    loss_curve: list[float]
    # None when the fold is too small or too uniform for the statistics
    report: EvalReport | None


@dataclass
class CvResult:
    folds: list[FoldResult]
    preds: np.ndarray
    labels: np.ndarray
    pooled: EvalReport
    extra: dict = field(default_factory=dict)


def _run_fold(spec, dataset, hp, seed, test_idx):
    from .nn.train import train

    train_idx = np.setdiff1d(np.arange(len(dataset)), test_idx)
    model = train(spec, dataset.subset(train_idx), hp, seed)
    test = dataset.subset(test_idx)
    return model.predict(test.inputs), list(model.loss_curve)


def cross_validate(dataset, spec, hp, seed: int = 0, fold_size: int = 5, workers: int = 1) -> CvResult:
    """Leave-``fold_size``-out: one independently seeded model per held-out fold."""
    n = len(dataset)
    if n < 10:
        raise ValidationError(f"cross-validation needs at least 10 samples, got {n}")
    folds = make_folds(n, seed, fold_size)
    fold_seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(len(folds) + 1)[1:]]
    jobs = [(spec, dataset, hp, s, idx) for s, idx in zip(fold_seeds, folds)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outputs = list(pool.map(_run_fold, *zip(*jobs)))
    else:
        outputs = [_run_fold(*job) for job in jobs]

    results = []
    pooled_preds = np.empty(n)
    for idx, (preds, curve) in zip(folds, outputs):
        labels = dataset.targets[idx].astype(np.float64)
        pooled_preds[idx] = preds
        try:
            report = evaluate(preds, labels)
        except MetricError:
            report = None
        results.append(FoldResult(idx, preds, labels, curve, report))
        log.info("fold of %d: MAE %.2f", len(idx), float(np.mean(np.abs(preds - labels))))
    labels = dataset.targets.astype(np.float64)
    return CvResult(results, pooled_preds, labels, evaluate(pooled_preds, labels))
