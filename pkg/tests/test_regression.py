import numpy as np
import pytest
import scipy.linalg
from scipy.spatial.distance import cdist

from alphadogs.regression import (
    RegressionModel,
    SingularSystem,
    SplineSystem,
    WeightedDataset,
    _Misfit,
    evaluate,
    fit,
    misfit,
    scaled,
    strictness_residuals,
)


def random_data(rng, n=None, m=None):
    n = int(rng.integers(1, 4)) if n is None else n
    m = int(rng.integers(n + 3, 30)) if m is None else m
    x = rng.random((m, n))
    y = np.sin(5 * x).sum(axis=1) + rng.normal(0, 0.3, m)
    s = rng.uniform(0.05, 0.5, m)
    return WeightedDataset(x, y, s)


def block_solve(data, rho):
    x, y, s = data.points, data.values, data.sigmas
    m, n = x.shape
    phi = cdist(x, x) ** 3
    v = np.hstack([np.ones((m, 1)), x])
    a = np.block([[phi + rho * np.diag(s**2), v], [v.T, np.zeros((n + 1, n + 1))]])
    sol = np.linalg.solve(a, np.r_[y, np.zeros(n + 1)])
    return sol[:m], sol[m:]


def spectral_misfit(data, rho):
    # independent closed form through the generalized eigenproblem of (B, A)
    x, y, s = data.points, data.values, data.sigmas
    m, n = x.shape
    v = np.hstack([np.ones((m, 1)), x])
    q2 = scipy.linalg.null_space(v.T)
    a = q2.T @ (cdist(x, x) ** 3) @ q2
    b = q2.T @ np.diag(s**2) @ q2
    mu, u = scipy.linalg.eigh(b, a)
    c = (q2 @ u).T @ y
    return float(np.sum(rho**2 * mu * c**2 / (1 + rho * mu) ** 2))


def test_matches_block_system_and_optimality():
    rng = np.random.default_rng(0)
    finite = 0
    for _ in range(60):
        data = random_data(rng)
        model = fit(data)
        if not np.isfinite(model.rho):
            continue
        finite += 1
        w, v = block_solve(data, model.rho)
        scale = max(1.0, np.abs(w).max())
        np.testing.assert_allclose(model.rbf_weights, w, atol=1e-7 * scale)
        np.testing.assert_allclose(model.linear_weights, v, atol=1e-7 * max(1.0, np.abs(v).max()))
        # p(x_i) - y_i + rho sigma_i^2 w_i = 0
        r = evaluate(model, data.points) - data.values + model.rho * data.sigmas**2 * model.rbf_weights
        assert np.abs(r).max() <= 1e-8 * max(1.0, np.abs(data.values).max())
        vw = np.hstack([np.ones((len(data), 1)), data.points]).T @ model.rbf_weights
        assert np.abs(vw).max() <= 1e-8 * scale
    assert finite > 30


def test_unit_misfit_and_strictness():
    rng = np.random.default_rng(1)
    for _ in range(100):
        data = random_data(rng)
        model = fit(data)
        assert strictness_residuals(model, data).max() <= 4.0 + 1e-9
        if 0 < model.rho < np.inf and strictness_residuals(model, data).max() < 4.0 - 1e-6:
            # unit-misfit branch unless the strictness loop had to shrink rho
            t = misfit(model, data)
            assert t <= 1.0 + 1e-6


def test_misfit_closed_form_and_derivative():
    rng = np.random.default_rng(2)
    for _ in range(20):
        data = random_data(rng)
        f = _Misfit(SplineSystem(data.points), data.values, data.sigmas**2)
        for rho in (1e-4, 1e-2, 1.0, 100.0):
            t, dt = f(rho)
            assert t == pytest.approx(spectral_misfit(data, rho), rel=1e-7, abs=1e-12)
            h = 1e-6 * rho
            fd = (f(rho + h)[0] - f(rho - h)[0]) / (2 * h)
            assert dt == pytest.approx(fd, rel=1e-4, abs=1e-10)


def test_misfit_monotone():
    rng = np.random.default_rng(3)
    data = random_data(rng, 2, 25)
    f = _Misfit(SplineSystem(data.points), data.values, data.sigmas**2)
    vals = [f(r)[0] for r in np.logspace(-6, 6, 80)]
    assert f(0.0)[0] == 0.0
    assert np.all(np.diff(vals) >= -1e-12 * max(vals))


def test_finite_branch_hits_unit_misfit():
    rng = np.random.default_rng(4)
    hits = 0
    for _ in range(40):
        data = random_data(rng)
        model = fit(data)
        if 0 < model.rho < np.inf and abs(misfit(model, data) - 1.0) <= 1e-6:
            hits += 1
    assert hits >= 20


def test_interpolation_when_sigma_zero():
    rng = np.random.default_rng(5)
    x = rng.random((12, 2))
    y = rng.random(12)
    model = fit(WeightedDataset(x, y, np.zeros(12)))
    assert model.rho == 0.0
    np.testing.assert_allclose(evaluate(model, x), y, atol=1e-10)


def test_linear_branch_recovers_line():
    rng = np.random.default_rng(6)
    x = rng.random((20, 2))
    y = 1.5 - 2.0 * x[:, 0] + 0.5 * x[:, 1] + rng.normal(0, 1e-9, 20)
    model = fit(WeightedDataset(x, y, np.full(20, 0.1)))
    assert model.rho == np.inf
    assert np.abs(model.rbf_weights).max() == 0.0
    np.testing.assert_allclose(model.linear_weights, [1.5, -2.0, 0.5], atol=1e-6)


def test_non_strict_model_detected():
    x = np.array([[0.0], [0.5], [1.0]])
    data = WeightedDataset(x, [0.0, 1.0, 0.0], [0.1, 0.1, 0.1])
    flat = RegressionModel(x, np.zeros(3), np.array([0.0, 0.0]), np.inf)
    assert strictness_residuals(flat, data).max() == pytest.approx(10.0)
    assert strictness_residuals(fit(data), data).max() <= 4.0 + 1e-9


def test_strictness_loop_shrinks_rho():
    # one very precise outlier forces the strictness loop
    x = np.linspace(0, 1, 9)[:, None]
    y = np.zeros(9)
    y[4] = 1.0
    s = np.full(9, 1.0)
    s[4] = 1e-3
    data = WeightedDataset(x, y, s)
    model = fit(data, beta_strict=0.5)
    assert strictness_residuals(model, data).max() <= 0.5 + 1e-9


def test_evaluate_direct_sum():
    rng = np.random.default_rng(7)
    for n in (1, 2, 3):
        c = rng.random((10, n))
        model = RegressionModel(c, rng.normal(size=10), rng.normal(size=n + 1), 1.0)
        for x in rng.random((20, n)):
            direct = sum(w * np.linalg.norm(x - ci) ** 3 for w, ci in zip(model.rbf_weights, c))
            direct += model.linear_weights[0] + model.linear_weights[1:] @ x
            assert evaluate(model, x) == pytest.approx(direct, abs=1e-12)
    tail = RegressionModel(c, np.zeros(10), np.array([1.0, 2.0, -1.0, 0.5]), np.inf)
    assert evaluate(tail, [0.1, 0.2, 0.3]) == pytest.approx(1.0 + 0.2 - 0.2 + 0.15)


def test_gradient_hessian_finite_difference():
    rng = np.random.default_rng(8)
    data = random_data(rng, 2, 15)
    model = fit(data)
    h = 1e-5
    for x in rng.random((20, 2)):
        g = model.gradient(x)
        hs = model.hessian(x)
        for a in range(2):
            e = np.zeros(2)
            e[a] = h
            fd = (evaluate(model, x + e) - evaluate(model, x - e)) / (2 * h)
            assert fd == pytest.approx(g[a], rel=1e-5, abs=1e-6)
            fdg = (model.gradient(x + e) - model.gradient(x - e)) / (2 * h)
            np.testing.assert_allclose(fdg, hs[:, a], rtol=1e-5, atol=1e-5)


def test_scaled_fit_equivariance():
    rng = np.random.default_rng(9)
    data = random_data(rng, 2, 15)
    base = fit(data)
    direct = fit(WeightedDataset(data.points, 3.0 * data.values, 3.0 * data.sigmas))
    x = rng.random((10, 2))
    np.testing.assert_allclose(evaluate(scaled(base, 3.0), x), evaluate(direct, x), rtol=1e-7, atol=1e-9)


def test_cached_system_matches_fresh():
    rng = np.random.default_rng(10)
    data = random_data(rng, 2, 20)
    system = SplineSystem(data.points)
    s = data.sigmas.copy()
    for i in range(30):
        s[i % 20] *= 0.9
        d = WeightedDataset(data.points, data.values, s)
        a = fit(d, system=system)
        b = fit(d)
        assert a.rho == pytest.approx(b.rho, rel=1e-6)
        np.testing.assert_allclose(a.rbf_weights, b.rbf_weights, rtol=1e-6, atol=1e-9)


def test_errors():
    with pytest.raises(SingularSystem):
        fit(WeightedDataset([[0.0, 0.0], [1.0, 1.0]], [0.0, 1.0], [0.1, 0.1]))
    with pytest.raises(SingularSystem):
        fit(WeightedDataset([[0.0, 0.0], [0.5, 0.5], [1.0, 1.0]], [0.0, 1.0, 0.0], [0.1] * 3))
    with pytest.raises(ValueError):
        WeightedDataset([[0.0]], [1.0, 2.0], [0.1])
    with pytest.raises(ValueError):
        fit(WeightedDataset([[0.0], [1.0]], [0.0, 1.0], [0.1, 0.1]), beta_strict=0)
