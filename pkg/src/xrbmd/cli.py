"""Command-line pipeline: synth -> calibrate -> project/register -> tune/fit -> predict -> evaluate.

Every subcommand reads one flat ``key = value`` config file. Exit codes:
0 success, 1 usage error, 2 invalid data or configuration, 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import __version__
from .bmd import (
    BmdRecord,
    BmdTarget,
    default_threshold_grid,
    drr_mean_intensity,
    fit_bmd_line,
    format_bmd_table,
    predict_bmd,
    read_bmd_calibration,
    read_bmd_table,
    tune_threshold,
    write_bmd_calibration,
)
from .calibration import apply_calibration, fit_calibration, format_rod_table, read_rod_table
from .cma import CmaConfig
from .errors import DataError, NumericalError, ParseError, XrbmdError
from .gradcheck import run_suite
from .imaging import atomic_write_text, read_image, read_volume, write_image, write_volume
from .metrics import (
    PairedSeries,
    bland_altman,
    decomposition_metrics,
    format_bland_altman_csv,
    format_metrics_csv,
    icc,
    regression_metrics,
    rms_cv,
)
from .pose import RigidTransform6
from .projection import geometry_from_fields, read_geometry, render_drr, write_geometry
from .registration import register_2d3d
from .synth import PhantomSpec, cohort_case_specs, generate_phantom, standard_geometry, sub_seed
from .textconfig import get_float, get_floats, get_int, get_ints, read_kv

log = logging.getLogger("xrbmd")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

SUBCOMMANDS = (
    "synth", "calibrate", "project", "register", "tune-threshold",
    "fit-bmd", "predict", "evaluate", "losses-check",
)

GEOMETRY_KEYS = ("mode", "detector_dims", "detector_spacing", "detector_center",
                 "basis_u", "basis_v", "ray_dir", "source", "step_mm")

POSE_COLUMNS = ("pose", "rx", "ry", "rz", "tx", "ty", "tz")
TRUTH_COLUMNS = ("case_id", "true_vbmd_mg_cm3", "true_abmd_g_cm2", "trabecular_density")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


# ---------------------------------------------------------------------------
# configuration


@dataclass
class RunConfig:
    """Validated run settings; ``fields`` keeps the raw text values."""

    path: Path
    fields: dict
    seed: int

    def get(self, key, default=None):
        return self.fields.get(key, default)

    def float(self, key, default=None):
        return get_float(self.fields, key, default, self.path)

    def int(self, key, default=None):
        return get_int(self.fields, key, default, self.path)

    def floats(self, key, n=None):
        return get_floats(self.fields, key, n, self.path)

    def ints(self, key, n=None):
        return get_ints(self.fields, key, n, self.path)

    def dir(self, key, must_exist=True):
        if key not in self.fields:
            raise ParseError("missing required key", key=key, path=self.path)
        p = Path(self.fields[key])
        if not p.is_absolute():
            p = (self.path.parent / p).resolve()
        if must_exist and not p.is_dir():
            raise ParseError(f"directory {p} does not exist", key=key, path=self.path)
        if not must_exist and not p.parent.is_dir():
            raise ParseError(f"parent directory of {p} does not exist", key=key, path=self.path)
        return p

    def has_geometry(self):
        return "mode" in self.fields


def load_config(path):
    path = Path(path)
    fields = read_kv(path)
    if "seed" not in fields:
        raise ParseError("missing required key", key="seed", path=path)
    return RunConfig(path.resolve(), fields, get_int(fields, "seed", path=path))


def _phantom_base(cfg):
    kw = {}
    if "dims" in cfg.fields:
        kw["dims"] = tuple(cfg.ints("dims", 3))
    if "spacing" in cfg.fields:
        kw["spacing"] = tuple(cfg.floats("spacing", 3))
    if "noise_sigma_hu" in cfg.fields:
        kw["noise_sigma_hu"] = cfg.float("noise_sigma_hu")
    base = PhantomSpec()
    if "dims" in kw or "spacing" in kw:
        # keep the anatomy at the same relative size inside the field of view
        dims = kw.get("dims", base.dims)
        spacing = kw.get("spacing", base.spacing)
        f = min(d * s for d, s in zip(dims, spacing)) / min(d * s for d, s in zip(base.dims, base.spacing))
        kw.update(_scaled_anatomy(base, f))
    try:
        return replace(base, **kw)
    except DataError as exc:
        raise ParseError(str(exc), path=cfg.path) from None


def _scaled_anatomy(base, f):
    def sc(v):
        return tuple(x * f for x in v)

    return dict(
        tissue_center=sc(base.tissue_center), tissue_radii=sc(base.tissue_radii),
        head_center=sc(base.head_center), head_radius=base.head_radius * f,
        neck_radius=base.neck_radius * f, neck_length=base.neck_length * f,
        shell_thickness=base.shell_thickness * f, pf_axial_range=sc(base.pf_axial_range),
        pf_margin=base.pf_margin * f,
        rod_centers_xy=tuple(sc(c) for c in base.rod_centers_xy), rod_radius=base.rod_radius * f,
    )


def _geometry(cfg, base=None, cohort=None):
    if cfg.has_geometry():
        fields = {k: cfg.fields[k] for k in GEOMETRY_KEYS if k in cfg.fields}
        return geometry_from_fields(fields, cfg.path)
    if cohort is not None:
        return read_geometry(cohort / "geometry.txt")
    mode = cfg.get("default_mode", "PINHOLE").upper()
    return standard_geometry(base, mode=mode, step_mm=min(base.spacing) * 0.5)


def _cma_config(cfg, seed):
    kw = dict(
        sigma0=tuple(cfg.floats("cma_sigma0", 6)) if "cma_sigma0" in cfg.fields else (2.0,) * 6,
        max_evaluations=cfg.int("cma_max_evaluations", 1500),
        tol_sigma=cfg.float("cma_tol_sigma", 1e-2),
        tol_fun=cfg.float("cma_tol_fun", 1e-10),
        population=cfg.int("cma_population") if "cma_population" in cfg.fields else None,
        seed=seed,
    )
    try:
        cma = CmaConfig(**kw)
        cma.resolved(6)
    except DataError as exc:
        raise ParseError(str(exc), path=cfg.path) from None
    return cma


# ---------------------------------------------------------------------------
# cohort files


def _format_poses(poses):
    lines = [",".join(POSE_COLUMNS)]
    for name, p in poses.items():
        lines.append(name + "," + ",".join(repr(float(v)) for v in p.as_array()))
    return "\n".join(lines) + "\n"


def _read_csv(path, columns):
    path = Path(path)
    if not path.is_file():
        raise ParseError("file not found", path=path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != tuple(columns):
            raise ParseError(f"expected header {','.join(columns)}", path=path)
        return list(reader)


def _read_poses(path):
    out = {}
    for row in _read_csv(path, POSE_COLUMNS):
        try:
            out[row["pose"]] = RigidTransform6.from_array([float(row[k]) for k in POSE_COLUMNS[1:]])
        except (TypeError, ValueError):
            raise ParseError(f"bad pose row {row}", path=path) from None
    return out


def _read_truth(path):
    rows = _read_csv(path, TRUTH_COLUMNS)
    if len(rows) != 1:
        raise ParseError("truth file must hold exactly one row", path=path)
    try:
        return {k: float(rows[0][k]) for k in TRUTH_COLUMNS[1:]}
    except (TypeError, ValueError):
        raise ParseError("non-numeric truth value", path=path) from None


def _case_dirs(cohort):
    cases = sorted(p for p in Path(cohort).iterdir() if p.is_dir() and p.name.startswith("case_"))
    if not cases:
        raise DataError(f"no case_XXXX directories in {cohort}")
    return cases


def _split(cases, cfg):
    frac = cfg.float("train_fraction", 0.8)
    if not 0 < frac <= 1:
        raise ParseError("train_fraction must be in (0, 1]", key="train_fraction", path=cfg.path)
    n_train = max(1, int(round(frac * len(cases))))
    return cases[:n_train], cases[n_train:]


def _target(cfg):
    t = cfg.get("target", "QCT").upper()
    if t not in BmdTarget.__members__:
        raise ParseError("target must be DXA or QCT", key="target", path=cfg.path)
    return BmdTarget(t)


def _truth_value(truth, target):
    return truth["true_vbmd_mg_cm3"] if target is BmdTarget.QCT else truth["true_abmd_g_cm2"]


def _quantize_bits(cfg):
    if "quantize_bits" not in cfg.fields:
        return None, None
    bits = cfg.int("quantize_bits")
    if not 1 <= bits <= 16:
        raise ParseError("quantize_bits must be in 1..16", key="quantize_bits", path=cfg.path)
    return bits, cfg.float("quantize_max")


def _load_drrs(out_dir, case_dirs, cfg):
    """PF-DRRs per (case, pose), optionally bit-depth reduced."""
    from .imaging import quantize_bits

    bits, top = _quantize_bits(cfg)
    drrs = []
    for case in case_dirs:
        poses = _read_poses(case / "poses.csv")
        for pose in poses:
            img = read_image(out_dir / case.name / f"pfdrr_{pose}.i2h")
            if bits is not None:
                scaled = img.with_data(np.clip(img.data / top, 0.0, 1.0))
                img = img.with_data(quantize_bits(scaled, bits).data * top)
            drrs.append((case.name, pose, img))
    return drrs


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(cfg):
    cohort = cfg.dir("cohort_dir", must_exist=False)
    n = cfg.int("n_cases")
    lo, hi = cfg.float("density_min", 100.0), cfg.float("density_max", 300.0)
    base = _phantom_base(cfg)
    geometry = _geometry(cfg, base)
    jitter = (cfg.float("pose_jitter_deg", 0.0), cfg.float("pose_jitter_mm", 0.0))
    xray_noise = cfg.float("xray_noise", 0.0)
    try:
        specs = cohort_case_specs(n, (lo, hi), cfg.seed, base=base, pose_jitter=jitter)
    except DataError as exc:
        raise ParseError(str(exc), path=cfg.path) from None

    # the first case exercises every spec check before anything is written
    first = generate_phantom(specs[0][1], specs[0][2], geometry, specs[0][0])
    cohort.mkdir(exist_ok=True)
    write_geometry(geometry, cohort / "geometry.txt")
    for i, (case_id, spec, poses) in enumerate(specs):
        case = first if i == 0 else generate_phantom(spec, poses, geometry, case_id)
        d = cohort / case_id
        write_volume(case.hu, d / "volume.v3h")
        write_volume(case.density, d / "density.v3h")
        write_volume(case.mask_bone, d / "mask_bone.v3h")
        write_volume(case.mask_pf, d / "mask_pf.v3h")
        atomic_write_text(d / "poses.csv", _format_poses(poses))
        atomic_write_text(d / "rods.csv", format_rod_table(case.rod_hu_means, case.rod_densities))
        areal = case.true_areal_map.data
        abmd = float(areal[areal > 0].mean())
        atomic_write_text(
            d / "truth.csv",
            ",".join(TRUTH_COLUMNS) + "\n"
            + f"{case_id},{case.true_vbmd!r},{abmd!r},{float(spec.trabecular_density)!r}\n",
        )
        for name, pose in poses.items():
            xray = render_drr(case.density, None, geometry, pose)
            if xray_noise > 0:
                rng = np.random.Generator(np.random.PCG64(sub_seed(cfg.seed, "xray", case_id, name)))
                xray = xray.with_data(xray.data + rng.normal(0.0, xray_noise * xray.data.max(), xray.data.shape))
            write_image(xray, d / f"xray_{name}.i2h")
        log.info("wrote %s", d)
    return EXIT_OK


def cmd_calibrate(cfg):
    cohort = cfg.dir("cohort_dir")
    out = cfg.dir("output_dir", must_exist=False)
    cases = _case_dirs(cohort)
    results = []
    for case in cases:
        hu, dens = read_rod_table(case / "rods.csv")
        line = fit_calibration(hu, dens)
        results.append((case.name, apply_calibration(read_volume(case / "volume.v3h"), line), line))
    for name, qct, line in results:
        write_volume(qct, out / name / "qct.v3h")
        atomic_write_text(
            out / name / "ct_calibration.txt",
            f"slope = {line.slope!r}\nintercept = {line.intercept!r}\n"
            f"residual_rmse = {line.residual_rmse!r}\nn_samples = {line.n_samples}\n",
        )
    return EXIT_OK


def cmd_project(cfg):
    cohort = cfg.dir("cohort_dir")
    out = cfg.dir("output_dir")
    geometry = _geometry(cfg, cohort=cohort)
    workers = cfg.int("workers", 1)
    cases = _case_dirs(cohort)
    jobs = []
    for case in cases:
        qct_path = out / case.name / "qct.v3h"
        if not qct_path.is_file():
            raise DataError(f"{qct_path} missing; run 'calibrate' first")
        jobs.append((case, qct_path))
    for case, qct_path in jobs:
        qct = read_volume(qct_path)
        mask = read_volume(case / "mask_pf.v3h")
        for name, pose in _read_poses(case / "poses.csv").items():
            drr = render_drr(qct, mask, geometry, pose, workers=workers)
            write_image(drr, out / case.name / f"pfdrr_{name}.i2h")
    return EXIT_OK


def cmd_register(cfg):
    cohort = cfg.dir("cohort_dir")
    out = cfg.dir("output_dir")
    geometry = _geometry(cfg, cohort=cohort)
    workers = cfg.int("workers", 1)
    pert_deg = cfg.float("reg_perturb_deg", 5.0)
    pert_mm = cfg.float("reg_perturb_mm", 5.0)
    restarts = cfg.int("reg_restarts", 1)
    if restarts < 0:
        raise ParseError("reg_restarts must be >= 0", key="reg_restarts", path=cfg.path)
    cases = _case_dirs(cohort)
    limit = cfg.int("reg_cases", len(cases))
    _cma_config(cfg, 0)
    rows = ["case_id,pose,rx,ry,rz,tx,ty,tz,gc"]
    for case in cases[:limit]:
        qct_path = out / case.name / "qct.v3h"
        volume = read_volume(qct_path if qct_path.is_file() else case / "density.v3h")
        for name, truth in _read_poses(case / "poses.csv").items():
            xray = read_image(case / f"xray_{name}.i2h")
            rng = np.random.Generator(np.random.PCG64(sub_seed(cfg.seed, "register", case.name, name)))
            offset = np.concatenate([rng.uniform(-pert_deg, pert_deg, 3), rng.uniform(-pert_mm, pert_mm, 3)])
            init = RigidTransform6.from_array(truth.as_array() + offset)
            cma = _cma_config(cfg, sub_seed(cfg.seed, "cma", case.name, name) % (2**32))
            pose, gc = register_2d3d(xray, volume, None, geometry, init, cma, workers=workers, restarts=restarts)
            rows.append(f"{case.name},{name}," + ",".join(repr(float(v)) for v in pose.as_array()) + f",{gc!r}")
    atomic_write_text(out / "registration.csv", "\n".join(rows) + "\n")
    return EXIT_OK


def _train_inputs(cfg):
    cohort = cfg.dir("cohort_dir")
    out = cfg.dir("output_dir")
    target = _target(cfg)
    train, _ = _split(_case_dirs(cohort), cfg)
    drrs = _load_drrs(out, train, cfg)
    truth = {c.name: _truth_value(_read_truth(c / "truth.csv"), target) for c in train}
    return out, target, drrs, [truth[c] for c, _, _ in drrs]


def _grid(cfg, drrs):
    count = cfg.int("threshold_count", 64)
    if count < 1:
        raise ParseError("threshold_count must be >= 1", key="threshold_count", path=cfg.path)
    if "threshold_max" in cfg.fields:
        return np.linspace(0.0, cfg.float("threshold_max"), count)
    return default_threshold_grid([d for _, _, d in drrs], count)


def cmd_tune_threshold(cfg):
    out, _, drrs, gt = _train_inputs(cfg)
    t_best, curve = tune_threshold([d for _, _, d in drrs], gt, _grid(cfg, drrs))
    atomic_write_text(out / "threshold_curve.csv",
                      "threshold,pcc\n" + "".join(f"{t!r},{r!r}\n" for t, r in curve))
    atomic_write_text(out / "threshold.txt", f"threshold = {t_best!r}\n")
    return EXIT_OK


def cmd_fit_bmd(cfg):
    out, target, drrs, gt = _train_inputs(cfg)
    if "threshold" in cfg.fields:
        t = cfg.float("threshold")
    else:
        t = get_float(read_kv(out / "threshold.txt"), "threshold", path=out / "threshold.txt")
    means = [drr_mean_intensity(d, t)[0] for _, _, d in drrs]
    cal = fit_bmd_line(means, gt, t, target)
    write_bmd_calibration(cal, out / "bmd_calibration.txt")
    return EXIT_OK


def cmd_predict(cfg):
    cohort = cfg.dir("cohort_dir")
    out = cfg.dir("output_dir")
    cal_path = Path(cfg.get("calibration", out / "bmd_calibration.txt"))
    if not cal_path.is_absolute():
        cal_path = cfg.path.parent / cal_path
    cal = read_bmd_calibration(cal_path)
    train, test = _split(_case_dirs(cohort), cfg)
    if not test:
        raise DataError("no held-out cases to predict; lower train_fraction")
    truth = {c.name: _truth_value(_read_truth(c / "truth.csv"), cal.target) for c in test}
    records = []
    for case_id, pose, drr in _load_drrs(out, test, cfg):
        mean, _ = drr_mean_intensity(drr, cal.threshold)
        records.append(BmdRecord(case_id, pose, mean, predict_bmd(drr, cal), truth[case_id]))
    atomic_write_text(out / "bmd_table.csv", format_bmd_table(records))
    return EXIT_OK


def cmd_evaluate(cfg):
    out = cfg.dir("output_dir")
    table = Path(cfg.get("bmd_table", out / "bmd_table.csv"))
    if not table.is_absolute():
        table = cfg.path.parent / table
    records = read_bmd_table(table)
    series = PairedSeries.from_records(records)
    items = []
    reg = regression_metrics(series)
    items += [("pcc", reg.pcc), ("icc", icc(series)), ("mae", reg.mae), ("see", reg.see)]
    if all(len(idx) >= 2 for idx in series.by_case().values()):
        items.append(("rms_cv_percent", rms_cv(series)))
    ba = bland_altman(series)
    items += [("ba_mean_diff", ba.mean_diff), ("ba_sd_diff", ba.sd_diff),
              ("ba_lower", ba.lower), ("ba_upper", ba.upper),
              ("ba_sample_outliers", int(ba.sample_outlier.sum())),
              ("ba_case_outliers", len(ba.case_outliers))]
    if "pred_drr_dir" in cfg.fields:
        pred_dir = cfg.dir("pred_drr_dir")
        thresholds = cfg.floats("dice_thresholds") if "dice_thresholds" in cfg.fields else None
        psnrs, dices = [], []
        for r in records:
            gt = read_image(out / r.case_id / f"pfdrr_{r.pose}.i2h")
            pred = read_image(pred_dir / r.case_id / f"pfdrr_{r.pose}.i2h")
            p, dsc = decomposition_metrics(gt, pred, thresholds)
            psnrs.append(p)
            dices.append(dsc)
        items += [("psnr_mean", float(np.mean(psnrs))), ("dice_mean", float(np.nanmean(dices)))]
    atomic_write_text(out / "metrics.csv", format_metrics_csv(items))
    atomic_write_text(out / "bland_altman.csv", format_bland_altman_csv(series, ba))
    return EXIT_OK


def cmd_losses_check(cfg):
    out = cfg.dir("output_dir", must_exist=False)
    trials = cfg.int("fd_trials", 100)
    if trials < 1:
        raise ParseError("fd_trials must be >= 1", key="fd_trials", path=cfg.path)
    results = run_suite(trials, cfg.seed)
    lines = ["kernel,trials,max_rel_error,tolerance,pass"]
    lines += [f"{r.kernel},{r.trials},{r.max_rel_error!r},{r.tolerance!r},{int(r.passed)}" for r in results]
    atomic_write_text(out / "losses_check.csv", "\n".join(lines) + "\n")
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC


COMMANDS = {
    "synth": cmd_synth,
    "calibrate": cmd_calibrate,
    "project": cmd_project,
    "register": cmd_register,
    "tune-threshold": cmd_tune_threshold,
    "fit-bmd": cmd_fit_bmd,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "losses-check": cmd_losses_check,
}

HELP = {
    "synth": "generate a synthetic cohort (volumes, masks, poses, truth, rod table, x-rays)",
    "calibrate": "fit each case's rod table and write calibrated density volumes",
    "project": "render masked proximal-femur DRRs for every case and pose",
    "register": "register each simulated x-ray to its volume; writes registration.csv",
    "tune-threshold": "choose the DRR threshold maximising PCC on the training cases",
    "fit-bmd": "fit the mean-intensity -> BMD line on the training cases",
    "predict": "predict BMD for the held-out cases; writes bmd_table.csv",
    "evaluate": "compute agreement metrics and Bland-Altman outliers from bmd_table.csv",
    "losses-check": "finite-difference check of the loss gradients; writes losses_check.csv",
}


def build_parser():
    parser = _Parser(prog="xrbmd", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to standard error")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, help=HELP[name], description=HELP[name])
        p.add_argument("--config", required=True, metavar="FILE", help="flat 'key = value' run config")
    return parser


def dispatch(argv=None):
    """Run one subcommand and return its exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        return COMMANDS[args.command](cfg)
    except DataError as exc:
        print(f"xrbmd {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"xrbmd {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except XrbmdError as exc:
        print(f"xrbmd {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


def main():
    sys.exit(dispatch())
