"""Cell-level metrics, aggregation with the degenerate-case rule, Friedman and Nemenyi tests."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import gammaincc
from scipy.stats import rankdata

from .errors import ConfigError, EmptySummaryError, ShapeError

METRICS = ("auc", "f1", "sensitivity", "specificity")
# metrics whose mean skips reports without positive cells
POSITIVE_METRICS = ("auc", "f1", "sensitivity")

# Nemenyi critical values q_0.05 for k = 2..10 treatments
NEMENYI_Q05 = {2: 1.960, 3: 2.343, 4: 2.569, 5: 2.728, 6: 2.850,
               7: 2.949, 8: 3.031, 9: 3.102, 10: 3.164}


@dataclass(frozen=True)
class Confusion:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: "Confusion") -> "Confusion":
        return Confusion(self.tp + other.tp, self.fp + other.fp,
                         self.tn + other.tn, self.fn + other.fn)


def confusion(probs, labels, threshold=0.5) -> Confusion:
    """Counts over all cells; a cell is predicted positive iff ``prob >= threshold``."""
    probs = np.asarray(probs)
    labels = np.asarray(labels)
    if probs.shape != labels.shape:
        raise ShapeError(f"probabilities {probs.shape} and labels {labels.shape} differ in shape")
    if not np.isin(labels, (0, 1)).all():
        raise ConfigError("labels must be binary (0/1)")
    pred = probs >= threshold
    pos = labels == 1
    tp = int(np.count_nonzero(pred & pos))
    fp = int(np.count_nonzero(pred & ~pos))
    fn = int(np.count_nonzero(~pred & pos))
    return Confusion(tp, fp, int(labels.size) - tp - fp - fn, fn)


def _ratio(num, den):
    return None if den == 0 else num / den


@dataclass(frozen=True)
class PRF:
    sensitivity: float | None
    specificity: float | None
    precision: float | None
    f1: float | None


def prf_metrics(c: Confusion) -> PRF:
    """Sensitivity, specificity, precision and F1; ``None`` marks a zero denominator."""
    # 2tp / (2tp + fp + fn) is the harmonic mean of precision and sensitivity
    return PRF(_ratio(c.tp, c.tp + c.fn), _ratio(c.tn, c.tn + c.fp),
               _ratio(c.tp, c.tp + c.fp), _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn))


def roc_auc(scores, labels) -> float | None:
    """Mann-Whitney estimate of the ROC area (ties count one half); ``None`` for one class."""
    scores = np.asarray(scores, dtype=float).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ShapeError(f"{scores.size} scores but {labels.size} labels")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)
    # rank sums are multiples of 1/2, so u is exact
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class MetricsReport:
    scope: str
    counts: Confusion
    auc: float | None
    f1: float | None
    sensitivity: float | None
    specificity: float | None
    precision: float | None = None

    @property
    def degenerate(self) -> bool:
        """No positive cells and none predicted (tp = fn = 0)."""
        return self.counts.tp == 0 and self.counts.fn == 0

    def metric(self, name):
        return getattr(self, name)


def evaluate_scope(scope, probs, labels, threshold=0.5) -> MetricsReport:
    c = confusion(probs, labels, threshold)
    m = prf_metrics(c)
    return MetricsReport(str(scope), c, roc_auc(probs, labels), m.f1, m.sensitivity,
                         m.specificity, m.precision)


@dataclass
class MetricSummary:
    mean: float | None
    std: float | None
    n: int

    def formatted(self) -> str:
        return format_mean_std(self.mean, self.std)


@dataclass
class Summary:
    metrics: dict[str, MetricSummary]
    excluded: list[str] = field(default_factory=list)
    n_reports: int = 0

    def __getitem__(self, name) -> MetricSummary:
        return self.metrics[name]


def aggregate(reports, exclude_degenerate=True) -> Summary:
    """Mean and population std per metric over reports.

    Reports with tp = fn = 0 are left out of AUC, F1 and sensitivity but kept
    for specificity when ``exclude_degenerate`` is set. Undefined metric values
    are skipped.
    """
    reports = list(reports)
    if not reports:
        raise EmptySummaryError("no reports to aggregate")
    excluded = [r.scope for r in reports if exclude_degenerate and r.degenerate]
    if len(excluded) == len(reports):
        raise EmptySummaryError(
            f"all {len(reports)} reports are degenerate (tp = fn = 0); nothing to summarise")
    out = {}
    for name in METRICS:
        pool = reports
        if exclude_degenerate and name in POSITIVE_METRICS:
            pool = [r for r in reports if not r.degenerate]
        vals = [r.metric(name) for r in pool if r.metric(name) is not None]
        if vals:
            out[name] = MetricSummary(float(np.mean(vals)), float(np.std(vals)), len(vals))
        else:
            out[name] = MetricSummary(None, None, 0)
    return Summary(out, excluded, len(reports))


def pooled_report(scope, sessions_probs, sessions_labels, threshold=0.5) -> MetricsReport:
    """Single report over the concatenation of several test sets."""
    probs = np.concatenate([np.asarray(p).reshape(-1) for p in sessions_probs])
    labels = np.concatenate([np.asarray(y).reshape(-1) for y in sessions_labels])
    return evaluate_scope(scope, probs, labels, threshold)


def _sig3(x: float) -> str:
    s = f"{x:#.3g}"
    if "e" in s:
        return f"{x:.2e}"
    if s.startswith("0."):
        return s[1:]
    if s.startswith("-0."):
        return "-" + s[2:]
    return s.rstrip(".")


def format_mean_std(mean, std) -> str:
    """Three significant digits without a leading zero, e.g. ``.990 ± .00386``."""
    if mean is None:
        return "n/a"
    return f"{_sig3(mean)} ± {_sig3(std if std is not None else 0.0)}"


# ---------------------------------------------------------------------------
# statistics
# ---------------------------------------------------------------------------

def chi2_sf(x, dof) -> float:
    """Upper tail probability of the chi-square distribution."""
    if dof <= 0:
        raise ConfigError(f"degrees of freedom must be positive, got {dof}")
    if x <= 0:
        return 1.0
    return float(gammaincc(dof / 2.0, x / 2.0))


@dataclass
class StatTestResult:
    chi_square: float
    degrees_of_freedom: int
    p_value: float
    mean_ranks: list[float]
    treatments: list[str]
    n_blocks: int
    critical_difference: float | None = None
    significant: np.ndarray | None = None


def friedman(scores, treatments=None) -> StatTestResult:
    """Friedman rank test over an ``N blocks x k treatments`` score matrix.

    Ranks are averaged within ties and the statistic is divided by the usual
    tie correction; a matrix where every block is constant gives chi2 = 0, p = 1.
    """
    x = np.asarray(scores, dtype=float)
    if x.ndim != 2:
        raise ShapeError(f"scores must be a 2-D blocks x treatments matrix, got shape {x.shape}")
    n, k = x.shape
    if n < 2 or k < 2:
        raise ConfigError(f"Friedman test needs N >= 2 blocks and k >= 2 treatments, got {x.shape}")
    if not np.isfinite(x).all():
        raise ConfigError("Friedman test scores must be finite")
    ranks = np.vstack([rankdata(row) for row in x])
    rank_sums = ranks.sum(axis=0)
    chi2 = 12.0 / (n * k * (k + 1)) * float(np.sum(rank_sums ** 2)) - 3.0 * n * (k + 1)
    ties = 0.0
    for row in x:
        _, counts = np.unique(row, return_counts=True)
        ties += float(np.sum(counts ** 3 - counts))
    correction = 1.0 - ties / (n * (k ** 3 - k))
    if correction <= 1e-12:
        chi2 = 0.0
    else:
        chi2 = max(chi2 / correction, 0.0)
    names = list(treatments) if treatments is not None else [str(i) for i in range(k)]
    return StatTestResult(chi2, k - 1, chi2_sf(chi2, k - 1), (rank_sums / n).tolist(), names, n)


def nemenyi_cd(k, n_blocks, alpha=0.05) -> float:
    if alpha != 0.05:
        raise ConfigError(f"only alpha = 0.05 is tabulated, got {alpha}")
    if k not in NEMENYI_Q05:
        raise ConfigError(f"Nemenyi table covers k = 2..10 treatments, got k = {k}")
    return NEMENYI_Q05[k] * math.sqrt(k * (k + 1) / (6.0 * n_blocks))


def nemenyi(scores, alpha=0.05, treatments=None) -> StatTestResult:
    """Friedman test plus the Nemenyi pairwise critical-difference matrix."""
    res = friedman(scores, treatments)
    k = len(res.mean_ranks)
    cd = nemenyi_cd(k, res.n_blocks, alpha)
    r = np.asarray(res.mean_ranks)
    sig = np.abs(r[:, None] - r[None, :]) > cd
    np.fill_diagonal(sig, False)
    res.critical_difference = cd
    res.significant = sig
    return res


# ---------------------------------------------------------------------------
# report files
# ---------------------------------------------------------------------------

REPORT_COLUMNS = ("config", "scope", "cells", "tp", "fp", "tn", "fn",
                  "auc", "f1", "sensitivity", "specificity", "precision")
SUMMARY_COLUMNS = ("config", "metric", "mean", "std", "n", "formatted", "excluded")


def _num(x):
    return "" if x is None else repr(float(x))


def reports_csv(tables: dict[str, list[MetricsReport]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for config, reports in tables.items():
        for r in reports:
            c = r.counts
            w.writerow([config, r.scope, c.total, c.tp, c.fp, c.tn, c.fn, _num(r.auc), _num(r.f1),
                        _num(r.sensitivity), _num(r.specificity), _num(r.precision)])
    return buf.getvalue()


def summary_csv(summaries: dict[str, Summary]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for config, s in summaries.items():
        for name in METRICS:
            m = s[name]
            w.writerow([config, name, _num(m.mean), _num(m.std), m.n, m.formatted(),
                        ";".join(s.excluded)])
    return buf.getvalue()


def summary_text(summaries: dict[str, Summary], stats: StatTestResult | None = None) -> str:
    lines = []
    width = max([len("config")] + [len(c) for c in summaries])
    lines.append("  ".join(["config".ljust(width)] + [m.ljust(18) for m in METRICS]).rstrip())
    for config, s in summaries.items():
        cells = [s[m].formatted().ljust(18) for m in METRICS]
        lines.append("  ".join([config.ljust(width)] + cells).rstrip())
        if s.excluded:
            lines.append(f"  excluded from auc/f1/sensitivity: {', '.join(s.excluded)}")
    lines.append("")
    if stats is None or len(stats.mean_ranks) < 2:
        lines.append("statistics: no comparison")
    else:
        lines.append(f"Friedman chi2({stats.degrees_of_freedom}) = {stats.chi_square:.4f}, "
                     f"p = {stats.p_value:.4g}, N = {stats.n_blocks}")
        lines.append("mean ranks: " + ", ".join(
            f"{t}={r:.3f}" for t, r in zip(stats.treatments, stats.mean_ranks)))
        if stats.significant is not None:
            lines.append(f"Nemenyi critical difference = {stats.critical_difference:.4f}")
            pairs = [f"{stats.treatments[i]} vs {stats.treatments[j]}"
                     for i in range(len(stats.treatments))
                     for j in range(i + 1, len(stats.treatments)) if stats.significant[i, j]]
            lines.append("significant pairs: " + (", ".join(pairs) if pairs else "none"))
    return "\n".join(lines) + "\n"


def emit_report(path, tables: dict[str, list[MetricsReport]], summaries: dict[str, Summary],
                stats: StatTestResult | None = None) -> list[Path]:
    """Write ``reports.csv``, ``summary.csv`` and ``summary.txt`` into directory ``path``."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    files = {"reports.csv": reports_csv(tables), "summary.csv": summary_csv(summaries),
             "summary.txt": summary_text(summaries, stats)}
    out = []
    for name, text in files.items():
        target = root / name
        tmp = target.with_name(name + ".tmp")
        tmp.write_text(text)
        tmp.replace(target)
        out.append(target)
    return out
