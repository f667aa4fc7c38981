"""(mu/mu_w, lambda)-CMA-ES with rank-one and rank-mu covariance updates.

Parameters follow the standard default settings (Hansen's tutorial, 2016):
log-linear positive recombination weights, cumulative step-size adaptation
with damping ``d_sigma``, and the ``h_sigma`` stall indicator on the
rank-one path. Per-coordinate initial step sizes are handled by optimising
in a scaled coordinate system ``x = x0 + scales * y`` with an isotropic
initial distribution in ``y``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

__all__ = ["CmaConfig", "CmaResult", "CmaState", "cma_es_minimize", "default_population"]


def default_population(n):
    return 4 + int(math.floor(3.0 * math.log(n)))


@dataclass(frozen=True)
class CmaConfig:
    """Optimizer settings.

    ``sigma0`` is either a scalar or one value per coordinate. ``population``
    and ``parents`` default to ``4 + floor(3 ln n)`` and half of that.
    """

    sigma0: float | tuple = 0.5
    population: int | None = None
    parents: int | None = None
    max_evaluations: int | None = None
    tol_sigma: float = 1e-12
    tol_fun: float = 1e-14
    seed: int = 0

    def resolved(self, n):
        """Return (lambda, mu, scales, max_evaluations) for dimension ``n``."""
        if n < 1:
            raise DataError("CMA-ES needs at least one parameter")
        lam = default_population(n) if self.population is None else int(self.population)
        mu = lam // 2 if self.parents is None else int(self.parents)
        if lam < 2:
            raise DataError(f"population must be >= 2, got {lam}")
        if not 1 <= mu <= lam:
            raise DataError(f"parents must be in [1, population], got {mu}")
        scales = np.broadcast_to(np.asarray(self.sigma0, dtype=np.float64), (n,)).copy()
        if not np.all(np.isfinite(scales)) or np.any(scales <= 0):
            raise DataError("sigma0 must be finite and > 0")
        max_evals = 1000 * n * n if self.max_evaluations is None else int(self.max_evaluations)
        if max_evals < 1:
            raise DataError("max_evaluations must be >= 1")
        if not (self.tol_sigma >= 0 and self.tol_fun >= 0):
            raise DataError("tolerances must be >= 0")
        return lam, mu, scales, max_evals


@dataclass
class CmaState:
    """Snapshot handed to the per-generation callback."""

    generation: int
    evaluations: int
    mean: np.ndarray
    sigma: float
    cov: np.ndarray
    best_f: float
    fitness: np.ndarray


@dataclass
class CmaResult:
    x_best: np.ndarray
    f_best: float
    evaluations: int
    generations: int
    stop_reason: str
    best_history: list = field(default_factory=list)

    def __iter__(self):
        # allows ``x, f, evals = cma_es_minimize(...)``
        return iter((self.x_best, self.f_best, self.evaluations))


def _finite_or_inf(v):
    v = float(v)
    return v if math.isfinite(v) else math.inf


def cma_es_minimize(objective, x0, config=CmaConfig(), callback=None, map_fn=map):
    """Minimise ``objective`` starting from ``x0``.

    Parameters
    ----------
    objective : callable
        Maps a 1-D float array to a scalar. Non-finite values rank last.
    x0 : array_like
        Initial mean; its length sets the dimension.
    config : CmaConfig
    callback : callable, optional
        Called with a :class:`CmaState` after every generation.
    map_fn : callable
        ``map``-compatible evaluator for one generation, e.g.
        ``executor.map``. Results are consumed in candidate order, so the
        trajectory does not depend on how evaluations are scheduled.

    Returns
    -------
    CmaResult
        Best point seen, its value, evaluation count and stop reason.
    """
    x0 = np.asarray(x0, dtype=np.float64).reshape(-1)
    n = x0.size
    lam, mu, scales, max_evals = config.resolved(n)
    rng = np.random.Generator(np.random.PCG64(config.seed))

    raw = math.log((lam + 1) / 2.0) - np.log(np.arange(1, mu + 1))
    weights = raw / raw.sum()
    mueff = 1.0 / np.sum(weights**2)

    cc = (4 + mueff / n) / (n + 4 + 2 * mueff / n)
    cs = (mueff + 2) / (n + mueff + 5)
    c1 = 2 / ((n + 1.3) ** 2 + mueff)
    cmu = min(1 - c1, 2 * (mueff - 2 + 1 / mueff) / ((n + 2) ** 2 + mueff))
    damps = 1 + 2 * max(0.0, math.sqrt((mueff - 1) / (n + 1)) - 1) + cs
    chi_n = math.sqrt(n) * (1 - 1 / (4 * n) + 1 / (21 * n * n))

    mean = np.zeros(n)
    sigma = 1.0
    cov = np.eye(n)
    p_sigma = np.zeros(n)
    p_c = np.zeros(n)
    eig_vals = np.ones(n)
    eig_vecs = np.eye(n)

    def to_x(y):
        return x0 + scales * y

    best_x = x0.copy()
    best_f = math.inf
    evals = 0
    gen = 0
    history = []
    recent_best = []
    flat_count = 0
    stop = ""
    hist_len = 10 + int(math.ceil(30 * n / lam))

    while True:
        if evals + lam > max_evals:
            stop = "max_evaluations"
            break
        z = rng.standard_normal((lam, n))
        d = np.sqrt(eig_vals)
        steps = (z * d) @ eig_vecs.T  # rows ~ N(0, C)
        ys = mean + sigma * steps
        xs = [to_x(y) for y in ys]
        fit = np.array([_finite_or_inf(f) for f in map_fn(objective, xs)])
        evals += lam
        gen += 1

        order = np.argsort(fit, kind="stable")
        if fit[order[0]] < best_f:
            best_f = float(fit[order[0]])
            best_x = xs[order[0]].copy()
        history.append(best_f)

        sel = steps[order[:mu]]
        step_w = weights @ sel
        mean = mean + sigma * step_w

        # C^{-1/2} applied to the weighted step
        inv_sqrt_step = eig_vecs @ ((eig_vecs.T @ step_w) / d)
        p_sigma = (1 - cs) * p_sigma + math.sqrt(cs * (2 - cs) * mueff) * inv_sqrt_step
        ps_norm = float(np.linalg.norm(p_sigma))
        h_sigma = ps_norm / math.sqrt(1 - (1 - cs) ** (2 * gen)) / chi_n < 1.4 + 2 / (n + 1)
        p_c = (1 - cc) * p_c + h_sigma * math.sqrt(cc * (2 - cc) * mueff) * step_w

        rank_mu = (sel.T * weights) @ sel
        delta_h = (1 - h_sigma) * cc * (2 - cc)
        cov = (
            (1 - c1 - cmu + c1 * delta_h) * cov
            + c1 * np.outer(p_c, p_c)
            + cmu * rank_mu
        )
        cov = 0.5 * (cov + cov.T)
        sigma *= math.exp((cs / damps) * (ps_norm / chi_n - 1))

        eig_vals, eig_vecs = np.linalg.eigh(cov)
        if eig_vals.min() <= 0:
            # numerical breakdown; restore a well-conditioned matrix
            eig_vals = np.maximum(eig_vals, 1e-20 * max(eig_vals.max(), 1e-20))
            cov = (eig_vecs * eig_vals) @ eig_vecs.T

        if callback is not None:
            callback(CmaState(gen, evals, to_x(mean), sigma, cov.copy(), best_f, fit.copy()))

        finite = fit[np.isfinite(fit)]
        recent_best.append(float(fit[order[0]]))
        if len(recent_best) > hist_len:
            recent_best.pop(0)
        coord_sd = sigma * np.sqrt(np.diag(cov)) * scales
        if np.all(coord_sd < config.tol_sigma):
            stop = "tol_sigma"
            break
        if finite.size == lam:
            spread = max(finite.max(), max(recent_best)) - min(finite.min(), min(recent_best))
            if spread < config.tol_fun:
                stop = "tol_fun"
                break
        if finite.size == 0:
            flat_count += 1
            if flat_count >= 10:
                stop = "no_finite_values"
                break
        else:
            flat_count = 0
        if not np.isfinite(sigma) or sigma * eig_vals.max() ** 0.5 > 1e12:
            stop = "diverged"
            break

    return CmaResult(best_x, best_f, evals, gen, stop, history)
