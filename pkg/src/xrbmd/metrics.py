"""Agreement and image-similarity statistics for BMD estimation."""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import DataError, NumericalError, ZeroVarianceError

__all__ = [
    "PairedSeries",
    "RegressionMetrics",
    "BlandAltmanReport",
    "pearson",
    "regression_metrics",
    "icc",
    "rms_cv",
    "psnr",
    "dice",
    "default_dice_thresholds",
    "decomposition_metrics",
    "bland_altman",
    "format_metrics_csv",
    "format_bland_altman_csv",
]


def pearson(x, y):
    """Sample Pearson correlation."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size != y.size:
        raise DataError(f"length mismatch {x.size} vs {y.size}")
    if x.size < 2:
        raise DataError("correlation needs at least 2 samples")
    xc = x - x.mean()
    yc = y - y.mean()
    sxx = float(xc @ xc)
    syy = float(yc @ yc)
    if sxx == 0.0 or syy == 0.0:
        raise ZeroVarianceError("correlation undefined for a constant series")
    r = float(xc @ yc) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


@dataclass(frozen=True)
class PairedSeries:
    """Predicted and ground-truth values keyed by (case_id, pose)."""

    case_ids: tuple
    poses: tuple
    predicted: np.ndarray
    ground_truth: np.ndarray

    def __post_init__(self):
        pred = np.asarray(self.predicted, dtype=np.float64).ravel()
        gt = np.asarray(self.ground_truth, dtype=np.float64).ravel()
        case_ids = tuple(str(c) for c in self.case_ids)
        poses = tuple(str(p) for p in self.poses)
        if not (len(case_ids) == len(poses) == pred.size == gt.size):
            raise DataError("case_ids, poses, predicted and ground_truth must have equal length")
        if not (np.all(np.isfinite(pred)) and np.all(np.isfinite(gt))):
            raise DataError("series values must be finite")
        if len(set(zip(case_ids, poses))) != len(case_ids):
            raise DataError("(case_id, pose) pairs must be unique")
        pred.setflags(write=False)
        gt.setflags(write=False)
        object.__setattr__(self, "case_ids", case_ids)
        object.__setattr__(self, "poses", poses)
        object.__setattr__(self, "predicted", pred)
        object.__setattr__(self, "ground_truth", gt)

    @classmethod
    def from_arrays(cls, predicted, ground_truth, case_ids=None, poses=None):
        n = len(predicted)
        case_ids = [f"case_{i:04d}" for i in range(n)] if case_ids is None else case_ids
        poses = ["-"] * n if poses is None else poses
        return cls(tuple(case_ids), tuple(poses), predicted, ground_truth)

    @classmethod
    def from_records(cls, records):
        return cls(
            tuple(r.case_id for r in records),
            tuple(r.pose for r in records),
            [r.pred_bmd for r in records],
            [r.gt_bmd for r in records],
        )

    def __len__(self):
        return len(self.case_ids)

    def by_case(self):
        """Indices of each case's records, in first-seen case order."""
        groups = OrderedDict()
        for i, c in enumerate(self.case_ids):
            groups.setdefault(c, []).append(i)
        return groups


class RegressionMetrics(NamedTuple):
    pcc: float
    mae: float
    see: float


def regression_metrics(series):
    """PCC, mean absolute error and standard error of estimate.

    SEE is the residual standard error (``n - 2`` degrees of freedom) of
    the least-squares line of ground truth on prediction.
    """
    n = len(series)
    if n < 3:
        raise DataError("regression metrics need at least 3 samples")
    p, g = series.predicted, series.ground_truth
    r = pearson(p, g)
    mae = float(np.mean(np.abs(p - g)))
    pc = p - p.mean()
    slope = float(pc @ (g - g.mean())) / float(pc @ pc)
    intercept = g.mean() - slope * p.mean()
    resid = g - (slope * p + intercept)
    see = math.sqrt(float(resid @ resid) / (n - 2))
    return RegressionMetrics(r, mae, see)


def icc(series):
    """ICC(2,1): two-way random effects, absolute agreement, single rater.

    Prediction and ground truth are the two raters; each record is a
    subject.
    """
    n = len(series)
    if n < 3:
        raise DataError("ICC needs at least 3 subjects")
    y = np.column_stack([series.predicted, series.ground_truth])
    k = y.shape[1]
    grand = y.mean()
    ss_rows = k * float(np.sum((y.mean(axis=1) - grand) ** 2))
    ss_cols = n * float(np.sum((y.mean(axis=0) - grand) ** 2))
    ss_total = float(np.sum((y - grand) ** 2))
    ss_err = ss_total - ss_rows - ss_cols
    ms_rows = ss_rows / (n - 1)
    ms_cols = ss_cols / (k - 1)
    ms_err = ss_err / ((n - 1) * (k - 1))
    denom = ms_rows + (k - 1) * ms_err + k * (ms_cols - ms_err) / n
    if denom <= 0:
        raise ZeroVarianceError("ICC undefined: no between-subject or error variance")
    return (ms_rows - ms_err) / denom


def rms_cv(series):
    """Root-mean-square of per-case coefficients of variation, in percent.

    Each case's CV uses the sample SD (``n - 1``) of its predictions across
    poses.
    """
    cvs = []
    for case, idx in series.by_case().items():
        vals = series.predicted[idx]
        if vals.size < 2:
            raise DataError(f"case {case} has {vals.size} prediction(s); need >= 2 poses")
        m = vals.mean()
        if m <= 0:
            raise NumericalError(f"case {case} has non-positive mean {m:g}")
        cvs.append(vals.std(ddof=1) / m)
    if not cvs:
        raise DataError("empty series")
    return 100.0 * math.sqrt(float(np.mean(np.square(cvs))))


def psnr(gt, pred):
    """Peak signal-to-noise ratio in dB with the peak taken as ``max(gt)``.

    Identical images give ``inf``.
    """
    g = np.asarray(getattr(gt, "data", gt), dtype=np.float64)
    p = np.asarray(getattr(pred, "data", pred), dtype=np.float64)
    if g.shape != p.shape:
        raise DataError(f"shape mismatch {g.shape} vs {p.shape}")
    mse = float(np.mean((g - p) ** 2))
    if mse == 0.0:
        return math.inf
    peak = float(g.max())
    if peak <= 0:
        raise NumericalError("PSNR undefined for a non-positive ground-truth peak")
    return 10.0 * math.log10(peak * peak / mse)


def dice(a, b):
    """Dice coefficient of two boolean masks; ``nan`` if both are empty."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise DataError(f"shape mismatch {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return math.nan
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def default_dice_thresholds(gt):
    g = np.asarray(getattr(gt, "data", gt), dtype=np.float64)
    return [f * float(g.max()) for f in (0.10, 0.25, 0.50, 0.75)]


def decomposition_metrics(gt_drr, pred_drr, dice_thresholds=None):
    """PSNR and the mean Dice over thresholds (``value >= threshold`` masks).

    Thresholds at which both masks are empty are skipped; if all are
    skipped the Dice mean is ``nan``.
    """
    g = np.asarray(getattr(gt_drr, "data", gt_drr), dtype=np.float64)
    p = np.asarray(getattr(pred_drr, "data", pred_drr), dtype=np.float64)
    if dice_thresholds is None:
        dice_thresholds = default_dice_thresholds(g)
    value = psnr(g, p)
    scores = [dice(g >= t, p >= t) for t in dice_thresholds]
    scores = [s for s in scores if not math.isnan(s)]
    return value, (float(np.mean(scores)) if scores else math.nan)


@dataclass(frozen=True)
class BlandAltmanReport:
    mean_diff: float
    sd_diff: float
    lower: float
    upper: float
    differences: np.ndarray
    means: np.ndarray
    sample_outlier: np.ndarray
    case_outliers: tuple

    @property
    def limits(self):
        return (self.lower, self.upper)


def bland_altman(series, z=1.96):
    """Bland-Altman limits of agreement with sample and case outliers.

    Differences are ``predicted - ground_truth`` and the limits are
    ``mean +- z * SD`` (sample SD). A sample is an outlier when it lies
    strictly outside the limits; a case is an outlier when all its
    samples lie beyond the same limit.
    """
    if len(series) < 3:
        raise DataError("Bland-Altman analysis needs at least 3 samples")
    d = series.predicted - series.ground_truth
    m = 0.5 * (series.predicted + series.ground_truth)
    mean_diff = float(d.mean())
    sd = float(d.std(ddof=1))
    lower, upper = mean_diff - z * sd, mean_diff + z * sd
    above = d > upper
    below = d < lower
    cases = tuple(
        case for case, idx in series.by_case().items()
        if np.all(above[idx]) or np.all(below[idx])
    )
    return BlandAltmanReport(mean_diff, sd, lower, upper, d, m, above | below, cases)


def format_metrics_csv(items):
    lines = ["metric,value"]
    lines += [f"{name},{float(value)!r}" for name, value in items]
    return "\n".join(lines) + "\n"


def format_bland_altman_csv(series, report):
    lines = ["case_id,pose,mean,difference,sample_outlier,case_outlier"]
    flagged = set(report.case_outliers)
    for i, (c, p) in enumerate(zip(series.case_ids, series.poses)):
        lines.append(
            f"{c},{p},{report.means[i]!r},{report.differences[i]!r},"
            f"{int(report.sample_outlier[i])},{int(c in flagged)}"
        )
    return "\n".join(lines) + "\n"
