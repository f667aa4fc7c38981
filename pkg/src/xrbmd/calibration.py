"""Phantom-based linear calibration of CT numbers to volumetric density."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, ParseError, RankDeficiencyError
from .imaging import VolumeUnit

__all__ = [
    "CalibrationLine",
    "fit_calibration",
    "apply_calibration",
    "read_rod_table",
    "format_rod_table",
]


@dataclass(frozen=True)
class CalibrationLine:
    """``density = slope * HU + intercept`` (mg/cm^3)."""

    slope: float
    intercept: float
    residual_rmse: float
    n_samples: int

    def __post_init__(self):
        if self.n_samples < 2:
            raise DataError("calibration needs at least 2 samples")
        if not (math.isfinite(self.slope) and math.isfinite(self.intercept)):
            raise DataError("calibration coefficients must be finite")
        if not self.residual_rmse >= 0:
            raise DataError("residual_rmse must be >= 0")

    def __call__(self, hu):
        return self.slope * np.asarray(hu, dtype=np.float64) + self.intercept


def _ols(x, y):
    """Slope/intercept of the least-squares line through (x, y), centred form."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise DataError(f"x and y must be 1-D of equal length, got {x.shape} and {y.shape}")
    if x.size < 2:
        raise DataError("need at least 2 samples for a line fit")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise DataError("fit inputs must be finite")
    xm, ym = x.mean(), y.mean()
    dx = x - xm
    sxx = float(dx @ dx)
    if sxx == 0.0:
        raise RankDeficiencyError("all abscissae are identical; line is undetermined")
    slope = float(dx @ (y - ym)) / sxx
    intercept = float(ym - slope * xm)
    return slope, intercept


def fit_calibration(hu_means, densities):
    """Ordinary least-squares fit of rod densities against rod HU means."""
    slope, intercept = _ols(hu_means, densities)
    hu = np.asarray(hu_means, dtype=np.float64)
    resid = np.asarray(densities, dtype=np.float64) - (slope * hu + intercept)
    rmse = float(np.sqrt(np.mean(resid**2)))
    return CalibrationLine(slope, intercept, rmse, int(hu.size))


def apply_calibration(volume, line):
    """Map a Hounsfield volume to density; negative results are clamped to 0."""
    if volume.unit != VolumeUnit.HOUNSFIELD:
        raise DataError(f"apply_calibration expects a HOUNSFIELD volume, got {volume.unit.value}")
    dens = np.maximum(line(volume.data), 0.0)
    return volume.with_data(dens, unit=VolumeUnit.DENSITY_MG_CM3)


ROD_COLUMNS = ("rod_id", "hu_mean", "density_mg_cm3")


def read_rod_table(path):
    """Read a rod CSV (``rod_id,hu_mean,density_mg_cm3``) into two float arrays."""
    path = Path(path)
    if not path.is_file():
        raise ParseError("rod table not found", path=path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != ROD_COLUMNS:
            raise ParseError(f"expected header {','.join(ROD_COLUMNS)}", path=path)
        hu, dens = [], []
        for row in reader:
            try:
                hu.append(float(row["hu_mean"]))
                dens.append(float(row["density_mg_cm3"]))
            except (TypeError, ValueError):
                raise ParseError(f"bad row {row}", path=path) from None
    return np.array(hu), np.array(dens)


def format_rod_table(hu_means, densities):
    lines = [",".join(ROD_COLUMNS)]
    for i, (h, d) in enumerate(zip(hu_means, densities)):
        lines.append(f"{i},{float(h)!r},{float(d)!r}")
    return "\n".join(lines) + "\n"
