import shutil
import subprocess
import sys
from pathlib import Path

import pytest

from xrbmd.cli import SUBCOMMANDS, dispatch

PIPELINE = ("synth", "calibrate", "project", "register", "tune-threshold", "fit-bmd", "predict", "evaluate")

BASE_CONFIG = """\
seed = 21
cohort_dir = cohort
output_dir = out
n_cases = 6
dims = 48 48 48
spacing = 2 2 2
default_mode = PARALLEL
xray_noise = 0.01
train_fraction = 0.5
reg_cases = 1
reg_restarts = 0
cma_max_evaluations = 45
threshold_count = 12
fd_trials = 3
"""


def write_config(root, text=BASE_CONFIG, name="run.cfg"):
    root.mkdir(parents=True, exist_ok=True)
    (root / "out").mkdir(exist_ok=True)
    path = root / name
    path.write_text(text)
    return path


def run_pipeline(root, extra=""):
    cfg = write_config(root, BASE_CONFIG + extra)
    codes = {cmd: dispatch([cmd, "--config", str(cfg)]) for cmd in PIPELINE + ("losses-check",)}
    return cfg, codes


def snapshot(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("run_a")
    cfg, codes = run_pipeline(root)
    return root, cfg, codes


def test_all_stages_succeed(pipeline):
    _, _, codes = pipeline
    assert codes == {cmd: 0 for cmd in codes}


def test_expected_outputs(pipeline):
    root, _, _ = pipeline
    case = root / "cohort" / "case_0000"
    for name in ("volume.v3h", "density.v3h", "mask_bone.v3h", "mask_pf.v3h", "poses.csv", "truth.csv",
                 "rods.csv", "xray_standing.i2h"):
        assert (case / name).is_file(), name
    out = root / "out"
    for name in ("registration.csv", "threshold.txt", "threshold_curve.csv", "bmd_calibration.txt",
                 "bmd_table.csv", "metrics.csv", "bland_altman.csv", "losses_check.csv",
                 "case_0000/qct.v3h", "case_0000/pfdrr_supine.i2h"):
        assert (out / name).is_file(), name
    metrics = dict(line.split(",") for line in (out / "metrics.csv").read_text().splitlines()[1:])
    assert {"pcc", "icc", "mae", "see", "rms_cv_percent", "ba_case_outliers"} <= set(metrics)
    assert float(metrics["pcc"]) > 0.9
    checks = (out / "losses_check.csv").read_text().splitlines()
    assert checks[0] == "kernel,trials,max_rel_error,tolerance,pass"
    assert all(line.endswith(",1") for line in checks[1:])
    assert len((out / "registration.csv").read_text().splitlines()) == 5


def test_no_temp_files_left(pipeline):
    root, _, _ = pipeline
    assert not [p for p in root.rglob("*") if p.name.startswith(".") or p.suffix == ".tmp"]


def test_rerun_is_byte_identical(pipeline, tmp_path):
    root, _, _ = pipeline
    _, codes = run_pipeline(tmp_path)
    assert set(codes.values()) == {0}
    a, b = snapshot(root), snapshot(tmp_path)
    assert a.keys() == b.keys()
    assert [k for k in a if a[k] != b[k]] == []


def test_parallel_render_is_byte_identical(pipeline, tmp_path):
    root, _, _ = pipeline
    shutil.copytree(root / "cohort", tmp_path / "cohort")
    shutil.copytree(root / "out", tmp_path / "out")
    cfg = write_config(tmp_path, BASE_CONFIG + "workers = 3\n")
    (tmp_path / "out" / "case_0000" / "pfdrr_supine.i2r").unlink()
    assert dispatch(["project", "--config", str(cfg)]) == 0
    assert dispatch(["register", "--config", str(cfg)]) == 0
    a, b = snapshot(root / "out"), snapshot(tmp_path / "out")
    assert [k for k in a if a[k] != b[k]] == []


def test_dxa_target(pipeline, tmp_path):
    root, _, _ = pipeline
    shutil.copytree(root / "cohort", tmp_path / "cohort")
    shutil.copytree(root / "out", tmp_path / "out")
    cfg = write_config(tmp_path, BASE_CONFIG + "target = DXA\n")
    for cmd in ("tune-threshold", "fit-bmd", "predict", "evaluate"):
        assert dispatch([cmd, "--config", str(cfg)]) == 0
    assert "target = DXA" in (tmp_path / "out" / "bmd_calibration.txt").read_text()


def test_unknown_subcommand(capsys):
    assert dispatch(["frobnicate", "--config", "x"]) == 1
    assert "usage" in capsys.readouterr().err


def test_missing_config_flag(capsys):
    assert dispatch(["evaluate"]) == 1
    assert "--config" in capsys.readouterr().err


def test_help_lists_every_subcommand(capsys):
    assert dispatch(["--help"]) == 0
    text = capsys.readouterr().out
    assert all(cmd in text for cmd in SUBCOMMANDS)


def test_predict_without_calibration(pipeline, tmp_path, capsys):
    root, _, _ = pipeline
    cfg = write_config(tmp_path, BASE_CONFIG.replace("cohort_dir = cohort", f"cohort_dir = {root / 'cohort'}"))
    assert dispatch(["predict", "--config", str(cfg)]) == 2
    assert "bmd_calibration.txt" in capsys.readouterr().err


def test_seed_is_mandatory(tmp_path, capsys):
    cfg = write_config(tmp_path, BASE_CONFIG.replace("seed = 21\n", ""))
    assert dispatch(["synth", "--config", str(cfg)]) == 2
    assert "seed" in capsys.readouterr().err


def test_include_rejected(tmp_path):
    cfg = write_config(tmp_path, BASE_CONFIG + "include = other.cfg\n")
    assert dispatch(["synth", "--config", str(cfg)]) == 2


def test_invalid_config_writes_nothing(tmp_path):
    # rods far too thin for the grid: caught before any file is written
    cfg = write_config(tmp_path, BASE_CONFIG.replace("dims = 48 48 48", "dims = 24 24 24")
                       .replace("spacing = 2 2 2", "spacing = 4 4 4"))
    assert dispatch(["synth", "--config", str(cfg)]) == 2
    assert not (tmp_path / "cohort").exists()
    bad = write_config(tmp_path, BASE_CONFIG + "cma_population = 1\n", "bad.cfg")
    assert dispatch(["register", "--config", str(bad)]) == 2
    assert not (tmp_path / "out" / "registration.csv").exists()


def test_numerical_failure_exit_code(pipeline, tmp_path):
    root, _, _ = pipeline
    shutil.copytree(root / "cohort", tmp_path / "cohort")
    shutil.copytree(root / "out", tmp_path / "out")
    cfg = write_config(tmp_path, BASE_CONFIG.replace("threshold_count = 12", "threshold_count = 3")
                       + "threshold_max = 1000\n")
    # only the 0 threshold is usable; thresholds above every pixel are rejected
    assert dispatch(["tune-threshold", "--config", str(cfg)]) == 0
    cfg2 = write_config(tmp_path, BASE_CONFIG + "threshold = 1000\n", "t.cfg")
    assert dispatch(["fit-bmd", "--config", str(cfg2)]) == 3


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "xrbmd", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.startswith("xrbmd ")
    proc = subprocess.run([sys.executable, "-m", "xrbmd", "nope"], capture_output=True, text=True)
    assert proc.returncode == 1
