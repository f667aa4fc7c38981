"""BMD from proximal-femur DRRs: thresholded mean intensity and its linear calibration."""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .calibration import _ols
from .errors import DataError, EmptyRegionError, NumericalError, ParseError
from .imaging import atomic_write_text
from .metrics import pearson
from .textconfig import format_kv, get_float, read_kv

__all__ = [
    "BmdTarget",
    "BmdCalibration",
    "BmdRecord",
    "drr_mean_intensity",
    "default_threshold_grid",
    "tune_threshold",
    "fit_bmd_line",
    "predict_bmd",
    "read_bmd_calibration",
    "write_bmd_calibration",
    "read_bmd_table",
    "format_bmd_table",
]


class BmdTarget(str, enum.Enum):
    DXA = "DXA"
    QCT = "QCT"


@dataclass(frozen=True)
class BmdCalibration:
    """Maps thresholded mean DRR intensity to BMD: ``slope * mean + intercept``."""

    threshold: float
    slope: float
    intercept: float
    target: BmdTarget = BmdTarget.QCT
    pcc_at_fit: float = float("nan")

    def __post_init__(self):
        object.__setattr__(self, "target", BmdTarget(self.target))
        if not (math.isfinite(self.threshold) and self.threshold >= 0):
            raise DataError(f"threshold must be finite and >= 0, got {self.threshold}")
        if not (math.isfinite(self.slope) and math.isfinite(self.intercept)):
            raise DataError("slope and intercept must be finite")


def _values(drr):
    return np.asarray(getattr(drr, "data", drr), dtype=np.float64)


def drr_mean_intensity(drr, t):
    """Mean of the pixels with value >= ``t`` and how many there are."""
    if not (math.isfinite(t) and t >= 0):
        raise DataError(f"threshold must be finite and >= 0, got {t}")
    v = _values(drr)
    sel = v[v >= t]
    if sel.size == 0:
        raise EmptyRegionError(f"no pixels at or above threshold {t:g}")
    return float(sel.mean()), int(sel.size)


def default_threshold_grid(drrs, count=64):
    """``count`` evenly spaced thresholds from 0 to the 99th percentile of pooled intensities."""
    pooled = np.concatenate([_values(d).ravel() for d in drrs])
    top = float(np.percentile(pooled, 99))
    return np.linspace(0.0, top, int(count))


def tune_threshold(drrs, gt_bmd, grid=None):
    """Pick the threshold whose mean intensities correlate best with ``gt_bmd``.

    Returns ``(t_best, curve)`` where ``curve`` is a list of ``(t, pcc)``
    with ``pcc = nan`` for thresholds that empty some image or leave the
    means constant. Ties go to the smallest threshold.
    """
    gt = np.asarray(gt_bmd, dtype=np.float64)
    if len(drrs) < 3 or len(drrs) != gt.size:
        raise DataError(f"need >= 3 DRRs with one ground truth each, got {len(drrs)} and {gt.size}")
    grid = default_threshold_grid(drrs) if grid is None else np.asarray(grid, dtype=np.float64)
    if grid.size == 0:
        raise DataError("threshold grid is empty")
    arrays = [_values(d) for d in drrs]
    curve = []
    best_t, best_r = None, -math.inf
    for t in grid:
        t = float(t)
        try:
            means = [drr_mean_intensity(a, t)[0] for a in arrays]
            r = pearson(means, gt)
        except NumericalError:
            curve.append((t, math.nan))
            continue
        curve.append((t, r))
        if r > best_r:
            best_t, best_r = t, r
    if best_t is None:
        raise EmptyRegionError("every threshold in the grid is invalid for this data")
    return best_t, curve


def fit_bmd_line(means, gt_bmd, t, target=BmdTarget.QCT):
    """Least-squares line from mean intensity to BMD, recording the fit PCC."""
    slope, intercept = _ols(means, gt_bmd)
    try:
        r = pearson(means, gt_bmd)
    except NumericalError:
        r = math.nan
    return BmdCalibration(float(t), slope, intercept, BmdTarget(target), r)


def predict_bmd(drr, cal):
    mean, _ = drr_mean_intensity(drr, cal.threshold)
    return cal.slope * mean + cal.intercept


# ---------------------------------------------------------------------------
# persistence


def write_bmd_calibration(cal, path):
    atomic_write_text(
        path,
        format_kv([
            ("target", cal.target.value),
            ("threshold", repr(cal.threshold)),
            ("slope", repr(cal.slope)),
            ("intercept", repr(cal.intercept)),
            ("pcc_at_fit", repr(cal.pcc_at_fit)),
        ]),
    )


def read_bmd_calibration(path):
    fields = read_kv(path)
    target = fields.get("target", "")
    if target not in BmdTarget.__members__:
        raise ParseError(f"target must be DXA or QCT, got '{target}'", key="target", path=path)
    try:
        return BmdCalibration(
            threshold=get_float(fields, "threshold", path=path),
            slope=get_float(fields, "slope", path=path),
            intercept=get_float(fields, "intercept", path=path),
            target=target,
            pcc_at_fit=get_float(fields, "pcc_at_fit", default="nan", path=path),
        )
    except ParseError:
        raise
    except DataError as exc:
        raise ParseError(str(exc), path=path) from None


@dataclass(frozen=True)
class BmdRecord:
    case_id: str
    pose: str
    mean_intensity: float
    pred_bmd: float
    gt_bmd: float


BMD_COLUMNS = ("case_id", "pose", "mean_intensity", "pred_bmd", "gt_bmd")


def format_bmd_table(records):
    lines = [",".join(BMD_COLUMNS)]
    for r in records:
        lines.append(f"{r.case_id},{r.pose},{r.mean_intensity!r},{r.pred_bmd!r},{r.gt_bmd!r}")
    return "\n".join(lines) + "\n"


def read_bmd_table(path):
    path = Path(path)
    if not path.is_file():
        raise ParseError("BMD table not found", path=path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != BMD_COLUMNS:
            raise ParseError(f"expected header {','.join(BMD_COLUMNS)}", path=path)
        out = []
        for row in reader:
            try:
                out.append(BmdRecord(
                    row["case_id"], row["pose"], float(row["mean_intensity"]),
                    float(row["pred_bmd"]), float(row["gt_bmd"]),
                ))
            except (TypeError, ValueError):
                raise ParseError(f"bad row {row}", path=path) from None
    return out
