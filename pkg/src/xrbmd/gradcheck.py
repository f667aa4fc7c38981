"""Central finite-difference verification of the analytic loss gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .losses import gc_loss, l1_loss
from .registration import gc_similarity

__all__ = ["GradCheckResult", "smooth_random_image", "finite_difference_grad", "check_kernel", "run_suite"]

FD_STEP = 1e-4
FD_RTOL = 1e-4
L1_KINK_GAP = 1e-3


@dataclass(frozen=True)
class GradCheckResult:
    kernel: str
    trials: int
    max_rel_error: float
    tolerance: float

    @property
    def passed(self):
        return self.max_rel_error <= self.tolerance


def smooth_random_image(rng, shape=(16, 16), sigma=2.0):
    """Gaussian-filtered white noise rescaled to unit standard deviation."""
    img = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="reflect")
    return (img - img.mean()) / img.std()


def finite_difference_grad(fn, x, h=FD_STEP):
    """Central differences of scalar ``fn`` at every element of ``x``."""
    x = np.array(x, dtype=np.float64)
    grad = np.empty_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = fn(x)
        flat[i] = orig - h
        down = fn(x)
        flat[i] = orig
        g[i] = (up - down) / (2 * h)
    return grad


def _rel_error(analytic, numeric, keep=None):
    if keep is not None:
        analytic = analytic[keep]
        numeric = numeric[keep]
    scale = np.max(np.abs(numeric))
    if scale == 0:
        return float(np.max(np.abs(analytic)))
    return float(np.max(np.abs(analytic - numeric)) / scale)


def check_kernel(name, trials=100, seed=0, shape=(16, 16)):
    """Worst relative gradient error of ``l1`` or ``gc`` over random smooth image pairs.

    The error of one trial is ``max|analytic - numeric| / max|numeric|``.
    For L1, pixels within ``1e-3`` of the kink ``target == output`` are
    excluded because the one-sided slopes differ there.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    worst = 0.0
    for _ in range(trials):
        t = smooth_random_image(rng, shape)
        o = smooth_random_image(rng, shape)
        if name == "l1":
            _, grad = l1_loss(t, o)
            num = finite_difference_grad(lambda x: l1_loss(t, x)[0], o)
            err = _rel_error(grad, num, np.abs(t - o) >= L1_KINK_GAP)
        elif name == "gc":
            _, grad = gc_loss(t, o)
            # value-only path: the probe never needs the analytic gradient
            num = finite_difference_grad(lambda x: -gc_similarity(t, x), o)
            err = _rel_error(grad, num)
        else:
            raise ValueError(f"unknown kernel {name!r}")
        worst = max(worst, err)
    return GradCheckResult(name, trials, worst, FD_RTOL)


def run_suite(trials=100, seed=0):
    return [check_kernel("l1", trials, seed), check_kernel("gc", trials, seed + 1)]
