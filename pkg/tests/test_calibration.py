import numpy as np
import pytest
from hypothesis import given, strategies as st

from xrbmd.calibration import (
    CalibrationLine,
    apply_calibration,
    fit_calibration,
    format_rod_table,
    read_rod_table,
)
from xrbmd.errors import DataError, ParseError, RankDeficiencyError
from xrbmd.imaging import VolumeUnit

from conftest import make_volume


def _line(slope, intercept):
    return CalibrationLine(slope, intercept, 0.0, 2)


def _hu(values):
    return make_volume(np.asarray(values, dtype=np.float64).reshape(1, 1, -1), unit=VolumeUnit.HOUNSFIELD)


def test_exact_linear_rods():
    line = fit_calibration([0, 100, 200, 400], [0, 50, 100, 200])
    assert line.slope == pytest.approx(0.5, abs=1e-15)
    assert line.intercept == pytest.approx(0.0, abs=1e-12)
    assert line.residual_rmse == pytest.approx(0.0, abs=1e-12)
    assert line.n_samples == 4


def test_flat_densities():
    line = fit_calibration([0, 1], [5, 5])
    assert line.slope == 0.0 and line.intercept == 5.0


def test_noisy_rods_match_normal_equations(rng):
    hu = rng.uniform(-100, 1200, 6)
    dens = 0.7 * hu + 12 + rng.normal(0, 5, 6)
    a = np.column_stack([hu, np.ones(6)])
    slope, intercept = np.linalg.solve(a.T @ a, a.T @ dens)
    line = fit_calibration(hu, dens)
    assert line.slope == pytest.approx(slope, abs=1e-9)
    assert line.intercept == pytest.approx(intercept, abs=1e-9)
    rmse = np.sqrt(np.mean((dens - a @ [slope, intercept]) ** 2))
    assert line.residual_rmse == pytest.approx(rmse, abs=1e-9)


def test_identical_hu_is_rank_deficient():
    with pytest.raises(RankDeficiencyError):
        fit_calibration([3, 3, 3], [1, 2, 3])


def test_too_few_or_mismatched():
    with pytest.raises(DataError):
        fit_calibration([1], [2])
    with pytest.raises(DataError):
        fit_calibration([1, 2, 3], [2, 3])


@given(st.floats(-5, 5, allow_nan=False).filter(lambda s: abs(s) > 1e-3),
       st.floats(-500, 500, allow_nan=False),
       st.lists(st.integers(-1000, 3000), min_size=2, max_size=8, unique=True))
def test_exact_data_reproduces_coefficients(slope, intercept, hu):
    hu = np.array(hu, dtype=np.float64)
    line = fit_calibration(hu, slope * hu + intercept)
    assert line.slope == pytest.approx(slope, rel=1e-12, abs=1e-12)
    assert line.intercept == pytest.approx(intercept, rel=1e-12, abs=1e-9)
    assert line.residual_rmse < 1e-9


def test_apply_identity():
    out = apply_calibration(_hu([300.0]), _line(1.0, 0.0))
    assert out.data.ravel()[0] == 300.0
    assert out.unit is VolumeUnit.DENSITY_MG_CM3


def test_apply_affine():
    assert apply_calibration(_hu([100.0]), _line(0.5, 10.0)).data.ravel()[0] == 60.0


def test_apply_clamps_negative():
    assert apply_calibration(_hu([20.0]), _line(1.0, -50.0)).data.ravel()[0] == 0.0


def test_apply_requires_hounsfield():
    with pytest.raises(DataError):
        apply_calibration(make_volume(np.zeros((1, 1, 1))), _line(1.0, 0.0))


@given(st.lists(st.floats(-2000, 4000, allow_nan=False), min_size=2, max_size=20),
       st.floats(0.01, 3, allow_nan=False), st.floats(-100, 100, allow_nan=False))
def test_apply_monotone(values, slope, intercept):
    v = np.sort(np.array(values))
    out = apply_calibration(_hu(v), _line(slope, intercept)).data.ravel()
    assert np.all(np.diff(out) >= 0)


def test_rod_table_roundtrip(tmp_path):
    hu = np.array([0.0, 62.5, 125.0])
    dens = np.array([0.0, 50.0, 100.0])
    (tmp_path / "rods.csv").write_text(format_rod_table(hu, dens))
    back_hu, back_dens = read_rod_table(tmp_path / "rods.csv")
    np.testing.assert_array_equal(back_hu, hu)
    np.testing.assert_array_equal(back_dens, dens)


def test_rod_table_bad_header(tmp_path):
    (tmp_path / "rods.csv").write_text("id,hu,density\n0,1,2\n")
    with pytest.raises(ParseError):
        read_rod_table(tmp_path / "rods.csv")
