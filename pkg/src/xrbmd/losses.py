"""Decomposition and regression training objectives as plain array kernels.

Network outputs (discriminator probabilities, discriminator features,
generated images) are supplied by the caller; nothing here owns a model.
The L1 and gradient-correlation terms also return their gradient with
respect to the generated image so an external trainer can be checked
against them.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .registration import _centred, _gradients

__all__ = [
    "LossWeights",
    "PROB_EPS",
    "gan_loss",
    "fm_loss",
    "l1_loss",
    "gc_loss",
    "dec_loss",
    "sample_weights",
    "weighted_regression_loss",
]

PROB_EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    l1: float = 100.0
    gc: float = 1.0
    fm: float = 10.0

    def __post_init__(self):
        for name in ("l1", "gc", "fm"):
            v = float(getattr(self, name))
            if not (math.isfinite(v) and v >= 0):
                raise DataError(f"loss weight {name} must be finite and >= 0, got {v}")


def _arr(x):
    return np.asarray(getattr(x, "data", x), dtype=np.float64)


def _pair(target, output):
    t, o = _arr(target), _arr(output)
    if t.shape != o.shape:
        raise DataError(f"target {t.shape} and output {o.shape} differ in shape")
    if t.size == 0:
        raise DataError("empty images")
    return t, o


def _wrap_grad(output, grad):
    if hasattr(output, "with_data"):
        return output.with_data(grad)
    return grad


def gan_loss(d_real, d_fake):
    """``mean(log D(real)) + mean(log(1 - D(fake)))`` with probabilities clamped."""
    r = np.asarray(d_real, dtype=np.float64).ravel()
    f = np.asarray(d_fake, dtype=np.float64).ravel()
    if r.size == 0 or f.size == 0:
        raise DataError("discriminator outputs must be non-empty")
    r = np.clip(r, PROB_EPS, 1.0 - PROB_EPS)
    f = np.clip(f, PROB_EPS, 1.0 - PROB_EPS)
    return float(np.mean(np.log(r)) + np.mean(np.log1p(-f)))


def fm_loss(real, fake):
    """Sum over layers of the mean absolute feature difference."""
    if len(real) != len(fake):
        raise DataError(f"feature stacks have {len(real)} and {len(fake)} layers")
    if len(real) == 0:
        raise DataError("feature stacks need at least one layer")
    total = 0.0
    for i, (r, f) in enumerate(zip(real, fake)):
        r = np.asarray(r, dtype=np.float64)
        f = np.asarray(f, dtype=np.float64)
        if r.shape != f.shape or r.size == 0:
            raise DataError(f"layer {i}: shapes {r.shape} and {f.shape} do not match")
        total += float(np.sum(np.abs(r - f))) / r.size
    return total


def l1_loss(target, output):
    """Mean absolute error and its gradient with respect to ``output``."""
    t, o = _pair(target, output)
    diff = t - o
    value = float(np.mean(np.abs(diff)))
    grad = -np.sign(diff) / diff.size
    return value, _wrap_grad(output, grad)


def _gradient_adjoint(u, axis):
    """Transpose of the ``np.gradient`` stencil along ``axis``."""
    u = np.moveaxis(u, axis, 0)
    r = np.zeros_like(u)
    r[0] -= u[0]
    r[1] += u[0]
    r[-1] += u[-1]
    r[-2] -= u[-1]
    if u.shape[0] > 2:
        r[2:] += 0.5 * u[1:-1]
        r[:-2] -= 0.5 * u[1:-1]
    return np.moveaxis(r, 0, axis)


def _ncc_and_grad(a, b):
    """NCC(a, b) and d NCC / d b."""
    ac, sa = _centred(a, "target gradient channel")
    bc, sb = _centred(b, "output gradient channel")
    norm = math.sqrt(sa * sb)
    value = float(np.sum(ac * bc)) / norm
    grad = ac / norm - value * bc / sb
    return value, grad


def gc_loss(target, output):
    """Negative gradient correlation and its gradient with respect to ``output``.

    The value is ``-(NCC(dx t, dx o) + NCC(dy t, dy o))``: -2 for a perfect
    match, so minimising it aligns image structure.
    """
    t, o = _pair(target, output)
    tgx, tgy = _gradients(t)
    ogx, ogy = _gradients(o)
    vx, gx = _ncc_and_grad(tgx, ogx)
    vy, gy = _ncc_and_grad(tgy, ogy)
    grad = -(_gradient_adjoint(gx, 1) + _gradient_adjoint(gy, 0))
    return -(vx + vy), _wrap_grad(output, grad)


def dec_loss(target, output, real_feats, fake_feats, weights=LossWeights()):
    """Weighted decomposition objective: L1 + GC + feature matching over all discriminators."""
    if len(real_feats) != len(fake_feats):
        raise DataError("need one real and one fake feature stack per discriminator")
    if len(real_feats) != 3:
        raise DataError(f"expected 3 discriminator scales, got {len(real_feats)}")
    l1, _ = l1_loss(target, output)
    gc, _ = gc_loss(target, output)
    fm = sum(fm_loss(r, f) for r, f in zip(real_feats, fake_feats))
    return weights.l1 * l1 + weights.gc * gc + weights.fm * fm


def sample_weights(y_all):
    """Per-sample weights in [0.5, 1.5], highest for values nearest the mean.

    ``w = 1.5 - (d - d_min) / (d_max - d_min)`` with ``d = |y - mean(y)|``.
    If every distance is equal the weights are all 1.0 and a warning is
    issued.
    """
    y = np.asarray(y_all, dtype=np.float64).ravel()
    if y.size < 2:
        raise DataError("sample weighting needs at least 2 samples")
    if not np.all(np.isfinite(y)):
        raise DataError("targets must be finite")
    d = np.abs(y - y.mean())
    d_min, d_max = d.min(), d.max()
    if d_max == d_min:
        warnings.warn("all distances to the mean are equal; using uniform weights", RuntimeWarning)
        return np.ones_like(y)
    return 1.5 - (d - d_min) / (d_max - d_min)


def weighted_regression_loss(y_true, y_pred, w):
    y_true = np.asarray(y_true, dtype=np.float64).ravel()
    y_pred = np.asarray(y_pred, dtype=np.float64).ravel()
    w = np.asarray(w, dtype=np.float64).ravel()
    if not (y_true.size == y_pred.size == w.size):
        raise DataError(f"length mismatch: {y_true.size}, {y_pred.size}, {w.size}")
    if y_true.size == 0:
        raise DataError("no samples")
    return float(np.mean(w * np.abs(y_true - y_pred)))
