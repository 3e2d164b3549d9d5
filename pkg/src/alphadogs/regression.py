"""Strict cubic polyharmonic spline regression through uncertain measurements.

The regression is

    p(x) = sum_i w_i |x - x_i|^3 + v . (1, x)

with weights from the block system

    [ Phi + rho diag(sigma^2)   V^T ] [w]   [y]
    [ V                         0   ] [v] = [0]

where ``Phi_ij = |x_i - x_j|^3`` and the columns of ``V`` are ``(1, x_i)``.
The smoothing parameter ``rho`` is chosen so that the normalized misfit

    T(rho) = sum_i ((p(x_i) - y_i) / sigma_i)^2 = rho^2 sum_i sigma_i^2 w_i^2

equals one, unless the weighted linear fit (the ``rho -> inf`` limit) already
has ``T <= 1``.  If the result violates ``|p(x_i) - y_i| <= beta sigma_i``,
``rho`` is reduced until it does not.

Writing ``w = Q2 u`` with ``Q2`` an orthonormal basis of the null space of
``V`` turns the system into ``(A + rho B) u = Q2^T y`` with
``A = Q2^T Phi Q2`` (positive definite, since the cubic kernel is
conditionally positive definite of order two) and ``B = Q2^T diag(sigma^2) Q2``.
Then ``T(rho) = rho^2 u^T B u`` and

    T'(rho) = 2 rho u^T B u - 2 rho^2 (B u)^T (A + rho B)^{-1} (B u).

In the eigenbasis of the pencil ``(B, A)`` every term of ``T`` is
``rho^2 mu c^2 / (1 + rho mu)^2``, so ``T`` is nondecreasing and the Newton
iteration on ``log(rho)`` needs safeguarding only against overshoot.

``A`` depends on the points alone and ``B`` changes by a rank-one term when
one ``sigma_i`` changes, so a :class:`SplineSystem` kept across fits makes
refitting after extra sampling cheap.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.spatial.distance import cdist

SIGMA_FLOOR = 1e-12
ROOT_TOL = 1e-7
MAX_NEWTON = 100
MAX_HALVINGS = 64


class RegressionError(Exception):
    pass


class SingularSystem(RegressionError):
    pass


class NonConvergence(RegressionError):
    pass


@dataclass(frozen=True)
class WeightedDataset:
    points: np.ndarray
    values: np.ndarray
    sigmas: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        y = np.asarray(self.values, dtype=float).reshape(-1)
        s = np.asarray(self.sigmas, dtype=float).reshape(-1)
        if not (len(pts) == len(y) == len(s)):
            raise ValueError("points, values and sigmas must have equal lengths")
        if np.any(s < 0) or not np.all(np.isfinite(s)):
            raise ValueError("sigmas must be finite and nonnegative")
        if not np.all(np.isfinite(y)) or not np.all(np.isfinite(pts)):
            raise ValueError("points and values must be finite")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "values", y)
        object.__setattr__(self, "sigmas", s)

    def __len__(self):
        return len(self.values)


@dataclass(frozen=True)
class RegressionModel:
    """A fitted cubic polyharmonic spline with linear tail.

    ``rho`` is ``inf`` for the pure linear fit and ``0`` for interpolation.
    """

    centers: np.ndarray
    rbf_weights: np.ndarray
    linear_weights: np.ndarray
    rho: float
    beta_strict: float = 4.0
    # p at the centers, filled in by fit
    center_values: np.ndarray = field(default=None, repr=False, compare=False)

    @property
    def dimension(self):
        return self.centers.shape[1]

    def __call__(self, x):
        return evaluate(self, x)

    def gradient(self, x):
        x = np.asarray(x, dtype=float)
        d = x - self.centers
        r = np.sqrt((d * d).sum(axis=1))
        return 3.0 * (self.rbf_weights * r) @ d + self.linear_weights[1:]

    def hessian(self, x):
        x = np.asarray(x, dtype=float)
        n = self.dimension
        d = x - self.centers
        r = np.sqrt((d * d).sum(axis=1))
        safe = np.where(r > 0, r, 1.0)
        coef = np.where(r > 0, self.rbf_weights / safe, 0.0)
        h = 3.0 * (self.rbf_weights * r).sum() * np.eye(n)
        return h + 3.0 * np.einsum("i,ij,ik->jk", coef, d, d)


def evaluate(model, x):
    """Value of the spline at ``x`` (a point, or an array of points)."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xs = x[None] if single else x
    r = cdist(xs, model.centers)
    out = (r**3) @ model.rbf_weights + model.linear_weights[0] + xs @ model.linear_weights[1:]
    return float(out[0]) if single else out


def values_at_centers(model):
    """``p(x_i)`` at every center, cached by ``fit``."""
    if model.center_values is not None:
        return model.center_values
    return evaluate(model, model.centers)


def strictness_residuals(model, data):
    """``|p(x_i) - y_i| / sigma_i`` for every measurement."""
    resid = np.abs(evaluate(model, data.points) - data.values)
    return resid / np.maximum(data.sigmas, SIGMA_FLOOR)


class SplineSystem:
    """Point-dependent factors of the regression system, reusable across fits."""

    REBUILD_EVERY = 256

    def __init__(self, points):
        x = np.asarray(points, dtype=float)
        m, n = x.shape
        self.points = x.copy()
        self.phi = cdist(x, x) ** 3
        vt = np.hstack([np.ones((m, 1)), x])
        q, r = np.linalg.qr(vt, mode="complete")
        diag = np.abs(np.diag(r[: n + 1]))
        if diag.min() <= 1e-12 * max(diag.max(), 1.0):
            raise SingularSystem("points do not determine a unique linear tail")
        self.q1, self.r1 = q[:, : n + 1], r[: n + 1]
        self.q2 = q[:, n + 1:]
        a = self.q2.T @ self.phi @ self.q2
        self.a = 0.5 * (a + a.T)
        self._s2 = None
        self._b = None
        self._updates = 0

    def matches(self, points):
        return self.points.shape == points.shape and np.array_equal(self.points, points)

    def penalty(self, s2):
        """``B = Q2^T diag(s2) Q2``, updated in place when few entries changed."""
        if self._s2 is not None and self._updates < self.REBUILD_EVERY:
            changed = np.flatnonzero(s2 != self._s2)
            if len(changed) <= max(4, len(s2) // 16):
                for i in changed:
                    qi = self.q2[i]
                    self._b += (s2[i] - self._s2[i]) * np.outer(qi, qi)
                self._s2 = s2.copy()
                self._updates += len(changed)
                return self._b
        self._b = self.q2.T @ (s2[:, None] * self.q2)
        self._s2 = s2.copy()
        self._updates = 0
        return self._b

    def coefficients(self, w, y, rho, s2):
        rhs = y - self.phi @ w - rho * s2 * w
        return scipy.linalg.solve_triangular(self.r1, self.q1.T @ rhs)


class _Misfit:
    """T(rho) and its derivative for fixed data."""

    def __init__(self, system, y, s2):
        self.system = system
        self.b = system.penalty(s2)
        self.rhs = system.q2.T @ y
        self._last = None

    def solve(self, rho):
        if self._last is not None and self._last[0] == rho:
            return self._last[1]
        try:
            factor = scipy.linalg.cho_factor(self.system.a + rho * self.b, check_finite=False)
        except np.linalg.LinAlgError as exc:
            raise SingularSystem("spline kernel matrix is not positive definite") from exc
        out = factor, scipy.linalg.cho_solve(factor, self.rhs, check_finite=False)
        self._last = rho, out
        return out

    def __call__(self, rho):
        if rho == 0.0 or self.b.shape[0] == 0:
            return 0.0, 0.0
        factor, u = self.solve(rho)
        bu = self.b @ u
        ubu = float(u @ bu)
        dt = 2.0 * rho * ubu - 2.0 * rho * rho * float(bu @ scipy.linalg.cho_solve(factor, bu, check_finite=False))
        return rho * rho * ubu, dt


def _weighted_linear(data):
    sig = np.maximum(data.sigmas, SIGMA_FLOOR)
    vt = np.hstack([np.ones((len(data), 1)), data.points])
    v, *_ = np.linalg.lstsq(vt / sig[:, None], data.values / sig, rcond=None)
    t_inf = float(np.sum(((vt @ v - data.values) / sig) ** 2))
    return v, t_inf


def _solve_unit_misfit(misfit, rho0):
    """Root of T(rho) = 1 by safeguarded Newton on log(T) against log(rho).

    ``log T`` is nearly linear in ``log rho`` (slope 2 for small ``rho``), so a
    warm start converges in a few steps.  Steps are clamped, a bracket is kept
    once both signs have been seen, and steps leaving it are replaced by
    bisection.  Returns None if no sign change is found.
    """
    max_step = 5.0
    lo = hi = None
    t = math.log(rho0)
    for _ in range(MAX_NEWTON + 300):
        if not -700.0 < t < 700.0:
            return None
        val, der = misfit(math.exp(t))
        if val <= 0.0:
            # T vanishes only where rho * sigma * w = 0; move up
            lo = t
            nt = t + max_step if hi is None else 0.5 * (t + hi)
        else:
            g = math.log(val)
            if abs(g) <= ROOT_TOL:
                return math.exp(t)
            if g < 0:
                lo = t
            else:
                hi = t
            slope = der * math.exp(t) / val
            if slope > 0:
                nt = t - g / slope
                nt = min(max(nt, t - max_step), t + max_step)
            else:
                nt = t + (max_step if g < 0 else -max_step)
            if lo is not None and hi is not None:
                if not lo < nt < hi:
                    nt = 0.5 * (lo + hi)
                if hi - lo <= 1e-14 * max(1.0, abs(t)):
                    return math.exp(t)
        t = nt
    raise NonConvergence("could not solve T(rho) = 1")


def _is_strict(model, data, beta):
    resid = np.abs(values_at_centers(model) - data.values)
    slack = 1e-10 * max(1.0, float(np.abs(data.values).max()))
    return bool(np.all(resid <= beta * data.sigmas + slack))


def fit(data, beta_strict=4.0, rho_guess=None, system=None):
    """Fit a strict regression to ``data``.

    Parameters
    ----------
    data : WeightedDataset
    beta_strict : float
        Strictness constant; every residual satisfies
        ``|p(x_i) - y_i| <= beta_strict * sigma_i``.
    rho_guess : float, optional
        Starting point for the smoothing-parameter search (e.g. the value
        from the previous fit).
    system : SplineSystem, optional
        Cached factors for ``data.points``; rebuilt if the points differ.

    Returns
    -------
    RegressionModel
    """
    if beta_strict <= 0:
        raise ValueError("beta_strict must be positive")
    if not isinstance(data, WeightedDataset):
        data = WeightedDataset(*data)
    m, n = data.points.shape
    if m < n + 1:
        raise SingularSystem(f"need at least {n + 1} points, got {m}")
    if system is None or not system.matches(data.points):
        system = SplineSystem(data.points)
    s2 = data.sigmas**2
    misfit_fn = _Misfit(system, data.values, s2)

    def build(rho):
        if math.isinf(rho):
            w = np.zeros(m)
            v, _ = _weighted_linear(data)
        else:
            if rho == 0.0 or misfit_fn.b.shape[0] == 0:
                u = np.linalg.solve(system.a, misfit_fn.rhs) if system.a.size else np.zeros(0)
            else:
                u = misfit_fn.solve(rho)[1]
            w = system.q2 @ u
            v = system.coefficients(w, data.values, rho, s2)
        at = system.phi @ w + v[0] + data.points @ v[1:]
        return RegressionModel(data.points.copy(), w, v, float(rho), float(beta_strict), at)

    if np.all(data.sigmas == 0):
        return build(0.0)

    rho = math.inf
    _, t_inf = _weighted_linear(data)
    if t_inf > 1.0:
        if rho_guess is None or not (0 < rho_guess < math.inf):
            tb = float(np.trace(misfit_fn.b))
            rho_guess = float(np.trace(system.a)) / tb if tb > 0 else 1.0
        root = _solve_unit_misfit(misfit_fn, rho_guess)
        if root is not None:
            rho = root

    model = build(rho)
    if _is_strict(model, data, beta_strict):
        return model
    if math.isinf(rho):
        tb = float(np.trace(misfit_fn.b))
        rho = 1e6 * float(np.trace(system.a)) / tb if tb > 0 else 1.0
    for _ in range(MAX_HALVINGS):
        rho *= 0.5
        model = build(rho)
        if _is_strict(model, data, beta_strict):
            return model
    return build(0.0)


def scaled(model, factor):
    """The model for measurements multiplied by ``factor``.

    The misfit ``T`` is unchanged when ``y`` and ``sigma`` are scaled together,
    so the fit scales linearly (with ``rho`` divided by ``factor**2``).
    """
    rho = model.rho if math.isinf(model.rho) else model.rho / factor**2
    at = None if model.center_values is None else model.center_values * factor
    return RegressionModel(model.centers, model.rbf_weights * factor, model.linear_weights * factor,
                           rho, model.beta_strict, at)


def misfit(model, data):
    """T = sum(((p(x_i) - y_i) / sigma_i)^2) evaluated directly."""
    resid = evaluate(model, data.points) - data.values
    return float(np.sum((resid / np.maximum(data.sigmas, SIGMA_FLOOR)) ** 2))
