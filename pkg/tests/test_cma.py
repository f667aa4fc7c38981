import numpy as np
import pytest
from concurrent.futures import ThreadPoolExecutor
from hypothesis import given, settings, strategies as st

from xrbmd.cma import CmaConfig, cma_es_minimize, default_population
from xrbmd.errors import DataError


def sphere(x):
    return float(np.sum(x * x))


def rosenbrock(x):
    return float(100 * (x[1] - x[0] ** 2) ** 2 + (1 - x[0]) ** 2)


def test_default_population():
    assert default_population(6) == 4 + int(3 * np.log(6))
    lam, mu, scales, max_evals = CmaConfig(sigma0=0.5).resolved(6)
    assert (lam, mu) == (9, 4)
    np.testing.assert_array_equal(scales, 0.5)
    assert max_evals == 36000


@pytest.mark.parametrize("kw", [dict(population=1), dict(parents=0), dict(parents=20, population=10),
                                dict(sigma0=0.0), dict(sigma0=(1.0, -1.0)), dict(max_evaluations=0)])
def test_invalid_config(kw):
    with pytest.raises(DataError):
        cma_es_minimize(sphere, np.ones(2), CmaConfig(**kw))


def test_sphere_6d():
    res = cma_es_minimize(sphere, np.ones(6), CmaConfig(sigma0=0.5, max_evaluations=4000, seed=1))
    assert res.f_best < 1e-10
    assert res.evaluations <= 4000


def test_rosenbrock_2d():
    res = cma_es_minimize(rosenbrock, np.zeros(2), CmaConfig(sigma0=0.5, max_evaluations=20000, seed=2))
    assert res.f_best < 1e-6
    assert res.evaluations <= 20000
    np.testing.assert_allclose(res.x_best, [1.0, 1.0], atol=1e-2)


def test_tuple_unpacking():
    x, f, evals = cma_es_minimize(sphere, np.ones(3), CmaConfig(seed=0, max_evaluations=200))
    assert x.shape == (3,) and f == sphere(x) and evals <= 200


def _trajectory(seed, map_fn=map):
    states = []
    res = cma_es_minimize(sphere, np.ones(4), CmaConfig(sigma0=0.3, max_evaluations=600, seed=seed),
                          callback=lambda s: states.append((s.mean.tobytes(), s.sigma, s.cov.tobytes())),
                          map_fn=map_fn)
    return res, states


def test_same_seed_bit_identical():
    (r1, s1), (r2, s2) = _trajectory(5), _trajectory(5)
    assert s1 == s2
    assert r1.x_best.tobytes() == r2.x_best.tobytes() and r1.f_best == r2.f_best


def test_different_seed_differs():
    assert _trajectory(5)[1] != _trajectory(6)[1]


def test_concurrent_evaluation_identical():
    with ThreadPoolExecutor(4) as pool:
        threaded = _trajectory(9, pool.map)
    assert threaded[1] == _trajectory(9)[1]


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 5))
def test_covariance_spd_and_best_monotone(seed, n):
    rng = np.random.Generator(np.random.PCG64(seed))
    a = rng.normal(size=(n, n))
    h = a @ a.T + 0.1 * np.eye(n)
    mins, bests = [], []

    def cb(state):
        mins.append(np.linalg.eigvalsh(state.cov).min())
        assert np.allclose(state.cov, state.cov.T)
        bests.append(state.best_f)

    res = cma_es_minimize(lambda x: float(x @ h @ x), rng.normal(size=n),
                          CmaConfig(sigma0=1.0, max_evaluations=300, seed=seed), callback=cb)
    assert min(mins) > 0
    assert all(b2 <= b1 for b1, b2 in zip(bests, bests[1:]))
    assert res.best_history == bests


def test_non_finite_values_rank_last():
    def f(x):
        return np.nan if x[0] < 0 else float((x[0] - 1) ** 2 + x[1] ** 2)

    res = cma_es_minimize(f, np.array([0.5, 0.5]), CmaConfig(sigma0=0.5, max_evaluations=3000, seed=3))
    assert res.f_best < 1e-8


def test_all_non_finite_stops():
    res = cma_es_minimize(lambda x: np.inf, np.zeros(2), CmaConfig(max_evaluations=10_000))
    assert res.stop_reason == "no_finite_values"
    assert res.f_best == np.inf


def test_stops_on_tol_sigma():
    res = cma_es_minimize(sphere, np.ones(2), CmaConfig(sigma0=0.5, tol_sigma=1e-3, tol_fun=0.0, seed=0))
    assert res.stop_reason == "tol_sigma"


def test_stops_on_tol_fun():
    res = cma_es_minimize(lambda x: 1.0, np.ones(2), CmaConfig(sigma0=0.5, seed=0))
    assert res.stop_reason == "tol_fun"


def test_stops_on_budget():
    res = cma_es_minimize(rosenbrock, np.zeros(2), CmaConfig(max_evaluations=50, seed=0))
    assert res.stop_reason == "max_evaluations" and res.evaluations <= 50


def test_per_coordinate_scales():
    # badly scaled problem solved easily once sigma0 matches the scales
    scales = np.array([1e-3, 1.0, 1e3])
    f = lambda x: float(np.sum((x / scales - 1) ** 2))  # noqa: E731
    res = cma_es_minimize(f, np.zeros(3), CmaConfig(sigma0=tuple(scales), max_evaluations=3000, seed=4))
    assert res.f_best < 1e-10
