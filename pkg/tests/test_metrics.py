import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from xrbmd.errors import DataError, NumericalError, ZeroVarianceError
from xrbmd.metrics import (
    PairedSeries,
    bland_altman,
    decomposition_metrics,
    default_dice_thresholds,
    dice,
    format_bland_altman_csv,
    format_metrics_csv,
    icc,
    pearson,
    psnr,
    regression_metrics,
    rms_cv,
)


def series(pred, gt, cases=None, poses=None):
    return PairedSeries.from_arrays(np.asarray(pred, float), np.asarray(gt, float), cases, poses)


def ba_fixture():
    """Ten cases x four poses; case_0003 sits well above the upper limit at every pose."""
    rng = np.random.Generator(np.random.PCG64(42))
    cases, poses, gt, pred = [], [], [], []
    for c in range(10):
        base = 150 + 10 * c
        for k, pose in enumerate(("standing", "supine", "abduction", "adduction")):
            cases.append(f"case_{c:04d}")
            poses.append(pose)
            gt.append(base)
            noise = [1.0, -1.0, 0.5, -0.5][k] * (1 + 0.1 * c)
            pred.append(base + noise + (60.0 if c == 3 else 0.0))
    return series(pred, gt, cases, poses)


# --- series -------------------------------------------------------------------


def test_series_validation():
    with pytest.raises(DataError):
        series([1, 2], [1])
    with pytest.raises(DataError):
        series([1, np.nan], [1, 2])
    with pytest.raises(DataError):
        series([1, 2], [1, 2], ["a", "a"], ["p", "p"])


# --- regression metrics ----------------------------------------------------------


def test_exact_affine():
    gt = np.arange(1.0, 11.0)
    m = regression_metrics(series(2 * gt + 1, gt))
    assert m.pcc == pytest.approx(1.0, abs=1e-12)
    assert m.see == pytest.approx(0.0, abs=1e-12)
    assert regression_metrics(series(-gt, gt)).pcc == pytest.approx(-1.0, abs=1e-12)


def test_regression_oracle(rng):
    gt = rng.normal(200, 30, 50)
    pred = gt + rng.normal(0, 10, 50)
    m = regression_metrics(series(pred, gt))
    assert m.pcc == pytest.approx(oracles.pearson(pred.tolist(), gt.tolist()), abs=1e-10)
    assert m.mae == pytest.approx(oracles.mae(pred.tolist(), gt.tolist()), abs=1e-10)
    assert m.see == pytest.approx(oracles.see(pred.tolist(), gt.tolist()), abs=1e-10)


def test_regression_needs_variance():
    with pytest.raises(ZeroVarianceError):
        regression_metrics(series([1, 1, 1], [1, 2, 3]))
    with pytest.raises(DataError):
        regression_metrics(series([1, 2], [1, 2]))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.01, 100), st.floats(-100, 100))
def test_pcc_affine_invariance(seed, a, b):
    rng = np.random.Generator(np.random.PCG64(seed))
    x, y = rng.normal(size=12), rng.normal(size=12)
    r = pearson(x, y)
    assert pearson(a * x + b, y) == pytest.approx(r, abs=1e-12)
    assert pearson(x, a * y + b) == pytest.approx(r, abs=1e-12)


# --- ICC ---------------------------------------------------------------------------


def test_icc_perfect():
    gt = np.arange(5.0)
    assert icc(series(gt, gt)) == pytest.approx(1.0, abs=1e-12)


def test_icc_penalises_offset(rng):
    gt = rng.normal(100, 10, 30)
    pred = gt + rng.normal(0, 2, 30)
    s = series(pred, gt)
    shifted = series(pred + 2 * np.ptp(gt), gt)
    assert regression_metrics(shifted).pcc == pytest.approx(regression_metrics(s).pcc, abs=1e-12)
    assert icc(shifted) < icc(s)
    assert icc(series(gt + 1000, gt)) < 0.5


def test_icc_oracle(rng):
    gt = rng.normal(0, 1, 30)
    pred = 0.8 * gt + rng.normal(0.3, 0.5, 30)
    assert icc(series(pred, gt)) == pytest.approx(oracles.icc21(pred.tolist(), gt.tolist()), abs=1e-10)


# --- RMS-CV --------------------------------------------------------------------------


def test_rms_cv_zero():
    s = series([5, 5, 7, 7], [0, 0, 0, 0], ["a", "a", "b", "b"], ["p", "q", "p", "q"])
    assert rms_cv(s) == 0.0


def test_rms_cv_hand_example():
    s = series([9, 11], [10, 10], ["a", "a"], ["p", "q"])
    assert rms_cv(s) == pytest.approx(100 * math.sqrt(2) / 10, abs=1e-12)
    assert rms_cv(s) == pytest.approx(14.1421, abs=1e-4)


def test_rms_cv_errors():
    with pytest.raises(DataError):
        rms_cv(series([1, 2], [1, 2], ["a", "b"], ["p", "p"]))
    with pytest.raises(NumericalError):
        rms_cv(series([-1, -2], [1, 2], ["a", "a"], ["p", "q"]))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.01, 1000))
def test_rms_cv_scale_invariant(seed, scale):
    rng = np.random.Generator(np.random.PCG64(seed))
    pred = rng.uniform(50, 150, 12)
    cases = [f"c{i // 3}" for i in range(12)]
    poses = [f"p{i % 3}" for i in range(12)]
    a = rms_cv(series(pred, pred, cases, poses))
    b = rms_cv(series(scale * pred, pred, cases, poses))
    assert b == pytest.approx(a, rel=1e-12, abs=1e-12)


def test_rms_cv_monte_carlo(rng):
    truth = rng.uniform(100, 300, 200)
    pred = np.repeat(truth, 4) * (1 + 0.03 * rng.standard_normal(800))
    cases = np.repeat([f"c{i}" for i in range(200)], 4)
    poses = np.tile(["a", "b", "c", "d"], 200)
    assert abs(rms_cv(series(pred, np.repeat(truth, 4), cases, poses)) - 3.0) < 0.5


# --- image metrics -----------------------------------------------------------------------


def test_psnr_and_dice_identical(rng):
    g = rng.random((6, 6))
    p, d = decomposition_metrics(g, g.copy())
    assert p == math.inf and d == 1.0


def test_zero_prediction_has_zero_dice(rng):
    g = rng.random((6, 6)) + 0.1
    for t in default_dice_thresholds(g):
        assert dice(g >= t, np.zeros_like(g) >= t) == 0.0
    assert decomposition_metrics(g, np.zeros_like(g))[1] == 0.0


def test_decomposition_oracle(rng):
    g, p = rng.random((7, 9)), rng.random((7, 9))
    ts = [0.1, 0.3, 0.5]
    value, d = decomposition_metrics(g, p, ts)
    assert value == pytest.approx(oracles.psnr(g.tolist(), p.tolist()), abs=1e-10)
    expected = [oracles.dice_sets(g.tolist(), p.tolist(), t) for t in ts]
    assert d == np.mean([e for e in expected if e is not None])


def test_dice_empty_threshold_skipped():
    g = np.array([[0.0, 1.0]])
    p = np.array([[0.0, 0.9]])
    # at t=5 both masks are empty and that threshold is skipped
    assert decomposition_metrics(g, p, [0.5, 5.0])[1] == 1.0
    assert math.isnan(dice(np.zeros(3, bool), np.zeros(3, bool)))


@given(st.lists(st.booleans(), min_size=1, max_size=20), st.lists(st.booleans(), min_size=1, max_size=20))
def test_dice_symmetric(a, b):
    n = min(len(a), len(b))
    a, b = np.array(a[:n]), np.array(b[:n])
    da, db = dice(a, b), dice(b, a)
    assert (math.isnan(da) and math.isnan(db)) or da == db
    if a.any():
        assert dice(a, a) == 1.0


def test_psnr_shape_mismatch():
    with pytest.raises(DataError):
        psnr(np.ones((2, 2)), np.ones((2, 3)))


# --- Bland-Altman ---------------------------------------------------------------------


def test_ba_constant_differences():
    r = bland_altman(series([2, 3, 4, 5], [1, 2, 3, 4]))
    assert r.sd_diff == 0.0 and r.lower == r.upper == 1.0
    assert not r.sample_outlier.any() and r.case_outliers == ()


def test_ba_fixture_flags_exactly_one_case():
    s = ba_fixture()
    r = bland_altman(s)
    assert r.case_outliers == ("case_0003",)
    flagged = {s.case_ids[i] for i in np.flatnonzero(r.sample_outlier)}
    assert flagged == {"case_0003"}


def test_ba_mirror():
    s = ba_fixture()
    r = bland_altman(s)
    mirrored = bland_altman(series(s.ground_truth, s.predicted, s.case_ids, s.poses))
    assert mirrored.mean_diff == pytest.approx(-r.mean_diff, abs=1e-12)
    assert mirrored.sd_diff == pytest.approx(r.sd_diff, abs=1e-12)
    assert mirrored.case_outliers == r.case_outliers
    np.testing.assert_array_equal(mirrored.sample_outlier, r.sample_outlier)


def test_ba_oracle(rng):
    pred, gt = rng.normal(100, 5, 24), rng.normal(100, 5, 24)
    cases = [f"c{i // 4}" for i in range(24)]
    poses = [f"p{i % 4}" for i in range(24)]
    r = bland_altman(series(pred, gt, cases, poses))
    m, sd, lo, hi, flags, out = oracles.bland_altman(pred.tolist(), gt.tolist(), cases)
    assert (r.mean_diff, r.sd_diff, r.lower, r.upper) == pytest.approx((m, sd, lo, hi), abs=1e-10)
    assert r.sample_outlier.tolist() == flags
    assert list(r.case_outliers) == out


def test_csv_formats():
    s = ba_fixture()
    r = bland_altman(s)
    text = format_bland_altman_csv(s, r)
    lines = text.splitlines()
    assert lines[0] == "case_id,pose,mean,difference,sample_outlier,case_outlier"
    assert len(lines) == 41
    assert sum(ln.endswith(",1") for ln in lines[1:]) == 4
    assert format_metrics_csv([("pcc", 0.5)]) == "metric,value\npcc,0.5\n"
