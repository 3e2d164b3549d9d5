"""Continuous and discrete search functions and the iteration classifier.

Inside simplex ``i`` the continuous search function is

    s_c(x) = p(x) - K e_i(x) = p(x) + K (|x - Z_i|^2 - R_i^2),

a smooth function of ``x``.  Since ``e(x) = max_i e_i(x)``, every such
"local" function lies above ``s_c`` everywhere on the box, and coincides with
it on simplex ``i``.  Minimizing each local function over the whole box
(rather than over its simplex) therefore never loses the global minimizer,
and the box projection is trivial.  Each local minimization is a projected
Newton iteration started from the simplex barycenter or from the projected
circumcenter.  All starts are scored first and only the most promising
``LOCAL_STARTS`` are refined, which keeps the cost per search roughly linear
in the number of simplices; the best true ``s_c`` value over all candidates
wins.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numba
import numpy as np

from .regression import RegressionModel, evaluate, values_at_centers

MAX_NEWTON = 50
GRAD_TOL = 1e-8
LATTICE_EDGE = 11
EXACT_CANDIDATES = 16
LOCAL_STARTS = 32
SCALE_LOWER = 1e-3
SCALE_UPPER = 1e3


class OptimizationFailure(RuntimeError):
    pass


@dataclass
class SearchContext:
    """Everything the two search functions need at one iteration.

    ``values`` and ``sigmas`` are the (already scaled) measurements that the
    regression was fit to.
    """

    regression: RegressionModel
    triangulation: object
    K: float
    alpha: float
    values: np.ndarray
    sigmas: np.ndarray
    lower: np.ndarray = None
    upper: np.ndarray = None

    def __post_init__(self):
        n = self.triangulation.dimension
        self.lower = np.zeros(n) if self.lower is None else np.asarray(self.lower, float)
        self.upper = np.ones(n) if self.upper is None else np.asarray(self.upper, float)
        self.values = np.asarray(self.values, dtype=float)
        self.sigmas = np.asarray(self.sigmas, dtype=float)


@dataclass(frozen=True)
class SearchOutcome:
    z: np.ndarray
    continuous_value: float
    j: int
    discrete_value: float


@dataclass(frozen=True)
class Supplemental:
    index: int


@dataclass(frozen=True)
class Identifying:
    point: np.ndarray


@dataclass(frozen=True)
class Refinement:
    pass


def measurement_scale(values, lower=SCALE_LOWER, upper=SCALE_UPPER):
    """Saturated inverse range ``r_s = clip(1 / (max y - min y), lower, upper)``."""
    spread = float(np.max(values) - np.min(values))
    r = math.inf if spread <= 0 else 1.0 / spread
    return min(max(r, lower), upper)


def _values_at_points(ctx):
    model, pts = ctx.regression, ctx.triangulation.points
    if model.centers.shape == pts.shape and np.array_equal(model.centers, pts):
        return values_at_centers(model)
    return evaluate(model, pts)


def discrete_values(ctx):
    p = _values_at_points(ctx)
    return np.minimum(p, 2.0 * ctx.values - p) - ctx.alpha * ctx.sigmas


def discrete_search(ctx):
    """Index and value of the minimizer of ``s_d`` over the stored points."""
    s = discrete_values(ctx)
    j = int(np.argmin(s))
    return j, float(s[j])


def continuous_value(ctx, x):
    """``s_c(x) = p(x) - K e(x)`` with ``e`` the maximum of the local remoteness functions."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    tri = ctx.triangulation
    e = tri.max_remoteness(x)
    return evaluate(ctx.regression, x) - ctx.K * np.maximum(e, 0.0)


@numba.njit(cache=True)
def _local_value(x, centers, w, v, kappa, v0, off, g, h):
    # -e(x) = d . (d - 2 off) with d = x - v0 and off = Z - v0
    n = x.shape[0]
    val = v[0]
    for a in range(n):
        da = x[a] - v0[a]
        val += v[a + 1] * x[a] + kappa * da * (da - 2.0 * off[a])
        g[a] = v[a + 1] + 2.0 * kappa * (da - off[a])
        for b in range(n):
            h[a, b] = 2.0 * kappa if a == b else 0.0
    d = np.empty(n)
    for i in range(centers.shape[0]):
        rr = 0.0
        for a in range(n):
            d[a] = x[a] - centers[i, a]
            rr += d[a] * d[a]
        r = math.sqrt(rr)
        if r == 0.0:
            continue
        wi = w[i]
        val += wi * r * rr
        for a in range(n):
            g[a] += 3.0 * wi * r * d[a]
            for b in range(n):
                hab = 3.0 * wi * d[a] * d[b] / r
                if a == b:
                    hab += 3.0 * wi * r
                h[a, b] += hab
    return val


@numba.njit(cache=True)
def _local_only(x, centers, w, v, kappa, v0, off):
    n = x.shape[0]
    val = v[0]
    for a in range(n):
        da = x[a] - v0[a]
        val += v[a + 1] * x[a] + kappa * da * (da - 2.0 * off[a])
    for i in range(centers.shape[0]):
        rr = 0.0
        for a in range(n):
            rr += (x[a] - centers[i, a]) ** 2
        val += w[i] * rr * math.sqrt(rr)
    return val


@numba.njit(cache=True)
def _start_values(starts, owner, anchors, offsets, kappa, centers, w, v, out):
    for s in range(starts.shape[0]):
        out[s] = _local_only(starts[s], centers, w, v, kappa, anchors[owner[s]], offsets[owner[s]])


@numba.njit(cache=True)
def _cholesky_solve(h, rhs, free, out):
    # solves h[F, F] d = rhs[F], shifting the diagonal until h[F, F] is positive definite
    idx = np.nonzero(free)[0]
    m = idx.shape[0]
    a = np.empty((m, m))
    scale = 0.0
    for i in range(m):
        scale = max(scale, abs(h[idx[i], idx[i]]))
    tau = 0.0
    lo = np.zeros((m, m))
    for _ in range(80):
        for i in range(m):
            for j in range(m):
                a[i, j] = h[idx[i], idx[j]]
            a[i, i] += tau
        good = True
        for j in range(m):
            s = a[j, j]
            for k in range(j):
                s -= lo[j, k] * lo[j, k]
            if s <= 1e-14 * max(scale, 1.0):
                good = False
                break
            lo[j, j] = math.sqrt(s)
            for i in range(j + 1, m):
                t = a[i, j]
                for k in range(j):
                    t -= lo[i, k] * lo[j, k]
                lo[i, j] = t / lo[j, j]
        if good:
            break
        tau = max(2.0 * tau, 1e-8 * max(scale, 1.0))
    y = np.empty(m)
    for i in range(m):
        t = rhs[idx[i]]
        for k in range(i):
            t -= lo[i, k] * y[k]
        y[i] = t / lo[i, i]
    for i in range(m - 1, -1, -1):
        t = y[i]
        for k in range(i + 1, m):
            t -= lo[k, i] * y[k]
        y[i] = t / lo[i, i]
    for i in range(out.shape[0]):
        out[i] = 0.0
    for i in range(m):
        out[idx[i]] = y[i]


@numba.njit(cache=True)
def _minimize_local(starts, owner, anchors, offsets, kappa, centers, w, v, lower, upper,
                    max_iter, gtol, xs_out, q_out, ok_out):
    n = starts.shape[1]
    g = np.empty(n)
    h = np.empty((n, n))
    d = np.empty(n)
    neg = np.empty(n)
    free = np.empty(n, dtype=np.bool_)
    xn = np.empty(n)
    for s in range(starts.shape[0]):
        v0 = anchors[owner[s]]
        off = offsets[owner[s]]
        x = np.minimum(np.maximum(starts[s].copy(), lower), upper)
        q = _local_value(x, centers, w, v, kappa, v0, off, g, h)
        ok = False
        for _ in range(max_iter):
            pg = 0.0
            nfree = 0
            for a in range(n):
                at_lo = x[a] <= lower[a] and g[a] > 0.0
                at_hi = x[a] >= upper[a] and g[a] < 0.0
                free[a] = not (at_lo or at_hi)
                if free[a]:
                    pg = max(pg, abs(g[a]))
                    nfree += 1
            if pg <= gtol:
                ok = True
                break
            for a in range(n):
                neg[a] = -g[a]
            _cholesky_solve(h, neg, free, d)
            slope = 0.0
            for a in range(n):
                slope += g[a] * d[a]
            if not slope < 0.0:
                for a in range(n):
                    d[a] = -g[a] if free[a] else 0.0
            t = 1.0
            accepted = False
            for _ls in range(60):
                moved = 0.0
                dec = 0.0
                for a in range(n):
                    xn[a] = min(max(x[a] + t * d[a], lower[a]), upper[a])
                    moved = max(moved, abs(xn[a] - x[a]))
                    dec += g[a] * (xn[a] - x[a])
                qn = _local_only(xn, centers, w, v, kappa, v0, off)
                if qn <= q + 1e-4 * dec:
                    accepted = True
                    break
                t *= 0.5
            if not accepted or moved <= 1e-15:
                # no further progress possible in floating point
                ok = True
                break
            for a in range(n):
                x[a] = xn[a]
            q = _local_value(x, centers, w, v, kappa, v0, off, g, h)
        xs_out[s] = x
        q_out[s] = q
        ok_out[s] = ok


def _lattice(vertices, per_edge=LATTICE_EDGE):
    n1 = len(vertices)
    m = per_edge - 1
    pts = []
    for combo in itertools.product(range(per_edge), repeat=n1 - 1):
        rest = m - sum(combo)
        if rest < 0:
            continue
        lam = np.array(combo + (rest,), dtype=float) / m
        pts.append(lam @ vertices)
    return np.array(pts)


def continuous_search(ctx):
    """Global minimizer ``z`` of ``s_c`` over the box and its value.

    Raises
    ------
    OptimizationFailure
        If no finite candidate is produced.
    """
    tri = ctx.triangulation
    model = ctx.regression
    simplices = tri.simplices
    ns = len(simplices)
    pts = tri.points
    bary = pts[simplices].mean(axis=1)
    circ = np.clip(tri.circumcenters, ctx.lower, ctx.upper)
    starts = np.empty((2 * ns, tri.dimension))
    starts[0::2] = bary
    starts[1::2] = circ
    owner = np.repeat(np.arange(ns), 2)
    anchors = np.ascontiguousarray(tri.anchors)
    offsets = np.ascontiguousarray(tri.offsets)
    centers = np.ascontiguousarray(model.centers)
    w = np.ascontiguousarray(model.rbf_weights)
    v = np.ascontiguousarray(model.linear_weights)
    kappa = float(ctx.K)
    if len(starts) > LOCAL_STARTS:
        q0 = np.empty(len(starts))
        _start_values(starts, owner, anchors, offsets, kappa, centers, w, v, q0)
        q0 = np.where(np.isfinite(q0), q0, np.inf)
        keep = np.sort(np.argsort(q0, kind="stable")[:LOCAL_STARTS])
        starts, owner = starts[keep], owner[keep]
    xs = np.empty_like(starts)
    qs = np.empty(len(starts))
    ok = np.zeros(len(starts), dtype=bool)
    scale = 1.0 + ctx.K + float(np.abs(w).sum() + np.abs(v).sum())
    _minimize_local(starts, owner, anchors, offsets, kappa, centers, w, v, ctx.lower, ctx.upper,
                    MAX_NEWTON, GRAD_TOL * scale, xs, qs, ok)
    # q_i >= s_c everywhere, so the local values are upper bounds on s_c at
    # their minimizers and the smallest of them bounds the global minimum
    cands = [xs[ok]]
    bounds = [qs[ok]]
    for s in np.unique(owner[~ok]):
        lat = _lattice(pts[simplices[s]])
        cands.append(lat)
        bounds.append(continuous_value(ctx, lat))
    cands.append(pts)
    bounds.append(_values_at_points(ctx))
    cands = np.vstack(cands)
    bounds = np.concatenate(bounds)
    bounds = np.where(np.isfinite(bounds), bounds, np.inf)
    order = np.argsort(bounds, kind="stable")[:EXACT_CANDIDATES]
    if not np.isfinite(bounds[order[0]]):
        raise OptimizationFailure("no finite continuous-search candidate")
    # exact values for the most promising candidates
    exact = continuous_value(ctx, cands[order])
    k = int(np.argmin(exact))
    return cands[order[k]].copy(), float(exact[k])


def search(ctx):
    z, sc = continuous_search(ctx)
    j, sd = discrete_search(ctx)
    return SearchOutcome(z, sc, j, sd)


def classify_iteration(continuous_value, discrete_index, discrete_value, sample_counts,
                       gamma, level, quantized_is_new, quantized_point=None):
    """Which branch of the main loop to take.

    Supplemental if the continuous minimum is worse than the discrete one and
    the discrete minimizer is still below its sampling cap ``gamma * 2**level``;
    otherwise Identifying if the quantized point is new; otherwise Refinement.
    """
    if continuous_value > discrete_value and sample_counts[discrete_index] < gamma * 2**level:
        return Supplemental(int(discrete_index))
    if quantized_is_new:
        return Identifying(quantized_point)
    return Refinement()
