"""Gradient-correlation 2D-3D rigid registration driven by CMA-ES."""

from __future__ import annotations

import logging
from dataclasses import replace

import numpy as np

from .cma import CmaConfig, cma_es_minimize
from .errors import DataError, RegistrationError, ZeroVarianceError
from .imaging import Image2D
from .pose import RigidTransform6
from .projection import render_drr

__all__ = [
    "RigidTransform6",
    "CmaConfig",
    "cma_es_minimize",
    "gradient_image",
    "ncc",
    "gc_similarity",
    "registration_config",
    "register_2d3d",
    "corner_tre",
]

log = logging.getLogger(__name__)

# a centred sum of squares below this fraction of the signal scale counts as zero
_ZERO_VAR_RTOL = 1e-24


def _gradients(arr):
    """Central differences inside, one-sided at the borders; (gx, gy)."""
    h, w = arr.shape
    if h < 2 or w < 2:
        raise DataError(f"gradient needs at least 2x2 pixels, got {w}x{h}")
    gy, gx = np.gradient(arr)
    return gx, gy


def gradient_image(image):
    """Return the x (column) and y (row) derivative images of ``image``."""
    gx, gy = _gradients(image.data)
    return image.with_data(gx), image.with_data(gy)


def _centred(a, name):
    ac = a - a.mean()
    ss = float(np.sum(ac * ac))
    scale = float(np.max(np.abs(a))) if a.size else 0.0
    if ss <= _ZERO_VAR_RTOL * a.size * scale * scale or ss == 0.0:
        raise ZeroVarianceError(f"{name} has zero variance; similarity undefined")
    return ac, ss


def _ncc(a, b):
    if a.shape != b.shape:
        raise DataError(f"shape mismatch {a.shape} vs {b.shape}")
    ac, sa = _centred(a, "first image")
    bc, sb = _centred(b, "second image")
    return float(np.sum(ac * bc) / np.sqrt(sa * sb))


def ncc(a, b):
    """Zero-mean normalised cross-correlation of two equally sized images."""
    return _ncc(np.asarray(getattr(a, "data", a), dtype=np.float64),
                np.asarray(getattr(b, "data", b), dtype=np.float64))


def _gc(a, b):
    agx, agy = _gradients(a)
    bgx, bgy = _gradients(b)
    return _ncc(agx, bgx) + _ncc(agy, bgy)


def gc_similarity(a, b):
    """Gradient correlation: NCC of the x-gradients plus NCC of the y-gradients."""
    a = np.asarray(getattr(a, "data", a), dtype=np.float64)
    b = np.asarray(getattr(b, "data", b), dtype=np.float64)
    if a.shape != b.shape:
        raise DataError(f"shape mismatch {a.shape} vs {b.shape}")
    return _gc(a, b)


def registration_config(seed=0, max_evaluations=1500):
    """Defaults used for pose search: 2 degree / 2 mm initial steps."""
    return CmaConfig(
        sigma0=(2.0, 2.0, 2.0, 2.0, 2.0, 2.0),
        max_evaluations=max_evaluations,
        tol_sigma=1e-2,
        tol_fun=1e-10,
        seed=seed,
    )


def register_2d3d(xray, volume, mask, geometry, init, config=None, workers=1, restarts=1):
    """Find the volume pose whose DRR best matches ``xray`` in gradient correlation.

    The search minimises ``-GC`` with CMA-ES starting at ``init``. Poses
    whose DRR has a constant gradient channel score ``+inf``. After the
    first run, ``restarts`` further runs start again from ``init`` with
    the population doubled each time and a fresh seed (IPOP style); the
    best pose over all runs wins. The initial pose competes too, so the
    returned GC is never below the GC at ``init``.

    Returns
    -------
    (RigidTransform6, float)
        Best pose found and its gradient correlation.
    """
    if tuple(xray.dims) != tuple(geometry.detector_dims):
        raise DataError(f"x-ray dims {xray.dims} differ from detector dims {geometry.detector_dims}")
    if config is None:
        config = registration_config()
    target = xray.data

    def objective(params):
        pose = RigidTransform6.from_array(params)
        drr = render_drr(volume, mask, geometry, pose, workers=workers)
        try:
            return -_gc(target, drr.data)
        except ZeroVarianceError:
            return np.inf

    if restarts < 0:
        raise DataError(f"restarts must be >= 0, got {restarts}")
    x0 = init.as_array()
    best_x, best_f = x0, objective(x0)
    lam = config.resolved(x0.size)[0]
    for k in range(restarts + 1):
        run = replace(config, population=lam * 2**k, seed=config.seed + k) if k else config
        result = cma_es_minimize(objective, x0, run)
        log.debug("registration run %d stop=%s evals=%d f=%g", k, result.stop_reason,
                  result.evaluations, result.f_best)
        if result.f_best < best_f:
            best_x, best_f = result.x_best, result.f_best
    if not np.isfinite(best_f):
        raise RegistrationError("DRR is constant for every pose tried; nothing to register")
    return RigidTransform6.from_array(best_x), -float(best_f)


def corner_tre(volume, pose_a, pose_b):
    """Mean distance (mm) between the 8 grid corners moved by two poses."""
    corners = volume.corners
    c = volume.center
    return float(np.mean(np.linalg.norm(pose_a.apply(corners, c) - pose_b.apply(corners, c), axis=1)))
