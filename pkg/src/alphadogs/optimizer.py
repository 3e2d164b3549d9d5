"""The alpha-DOGS main loop and the fixed-sampling Delta-DOGS baseline.

All geometry lives in the unit cube: a point's unit coordinates ``u`` map to
the objective's box through ``lower + (upper - lower) * u``.  Grid nodes in
the unit cube are dyadic rationals and therefore exact in floating point, so
membership in the evaluated set is tested by exact coordinate comparison.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .geometry import MAX_DIMENSION, Triangulation, UnsupportedDimension, build_triangulation
from .grid import GridLevel, quantize
from .regression import SplineSystem, WeightedDataset, fit, scaled
from .sampling import (
    decode_stream,
    encode_stream,
    initial_measure,
    point_stream,
    supplemental_measure,
    EvaluatedPoint,
)
from .search import (
    Identifying,
    Refinement,
    SearchContext,
    Supplemental,
    classify_iteration,
    continuous_search,
    discrete_search,
    measurement_scale,
)

SNAPSHOT_VERSION = 1


class BudgetExhausted(RuntimeError):
    """A tolerance-based run hit its iteration or sample cap first."""

    def __init__(self, message, state, history):
        super().__init__(message)
        self.state = state
        self.history = history


@dataclass(frozen=True)
class AlphaDogsParams:
    alpha0: float = 0.5
    alpha_delta: float = 0.5
    K0: float = 0.5
    ell0: int = 3
    beta_strict: float = 4.0
    gamma: float = 100.0
    N0: int = 1
    N_delta: int = 1
    scale_lower: float = 1e-3
    scale_upper: float = 1e3

    def __post_init__(self):
        for name in ("alpha0", "alpha_delta", "K0", "beta_strict", "scale_lower", "scale_upper"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.gamma < 1:
            raise ValueError("gamma must be at least 1")
        if int(self.ell0) != self.ell0 or self.ell0 < 0:
            raise ValueError("ell0 must be a nonnegative integer")
        for name in ("N0", "N_delta"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.scale_lower > self.scale_upper:
            raise ValueError("scale_lower must not exceed scale_upper")


@dataclass(frozen=True)
class StoppingRule:
    """Stop after ``max_iterations``, after ``max_total_samples`` samples, or
    once some point has ``|y - f*| <= measure_tol`` and ``sigma <= sigma_tol``.

    When a tolerance is given the caps act as a safety budget and hitting
    them raises ``BudgetExhausted``.
    """

    max_iterations: int = None
    max_total_samples: int = None
    measure_tol: float = None
    sigma_tol: float = None

    def __post_init__(self):
        if self.max_iterations is None and self.max_total_samples is None and self.measure_tol is None:
            raise ValueError("stopping rule needs a cap or a tolerance")
        if (self.measure_tol is None) != (self.sigma_tol is None):
            raise ValueError("measure_tol and sigma_tol go together")
        if self.max_iterations is not None and self.max_iterations < 0:
            raise ValueError("max_iterations must be nonnegative")

    @property
    def uses_tolerance(self):
        return self.measure_tol is not None


@dataclass
class IterationRecord:
    iteration: int
    branch: str
    point_count: int
    cumulative_samples: int
    averaging_time: float
    candidate: list
    candidate_y: float
    candidate_sigma: float
    regret: float
    best_regret: float
    reference_error: float
    alpha: float
    K: float
    level: int

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class CandidateReport:
    index: int
    candidate: EvaluatedPoint
    regret: float = None
    reference_error: float = None


@dataclass
class OptimizerState:
    points: list
    unit: np.ndarray
    level: int
    refinements: int
    alpha: float
    K: float
    triangulation: Triangulation
    seed: int
    algorithm: str = "alpha_dogs"
    iteration: int = 0
    rho: float = None
    best_regret: float = None
    keys: set = field(default_factory=set)
    system: SplineSystem = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if not self.keys:
            self.keys = {tuple(u) for u in self.unit.tolist()}

    @property
    def dimension(self):
        return self.unit.shape[1]

    @property
    def total_samples(self):
        return sum(p.sample_count for p in self.points)

    @property
    def sample_counts(self):
        return np.array([p.sample_count for p in self.points])

    @property
    def measurements(self):
        return np.array([p.measurement for p in self.points])

    @property
    def sigmas(self):
        return np.array([p.sigma for p in self.points])

    @property
    def grid(self):
        n = self.dimension
        return GridLevel(self.level, (0.0,) * n, (1.0,) * n)


def to_box(obj, u):
    lo, hi = np.asarray(obj.lower, float), np.asarray(obj.upper, float)
    return lo + (hi - lo) * np.asarray(u, float)


def to_unit(obj, x):
    lo, hi = np.asarray(obj.lower, float), np.asarray(obj.upper, float)
    return (np.asarray(x, float) - lo) / (hi - lo)


def reference_error(sigma0, cumulative_samples):
    """``sigma0 / sqrt(k)``: the error had all ``k`` samples gone to one point."""
    if cumulative_samples < 1:
        raise ValueError("cumulative_samples must be at least 1")
    return sigma0 / math.sqrt(cumulative_samples)


def box_vertices(n):
    return np.array(list(itertools.product((0.0, 1.0), repeat=n)))


def _add_point(state, obj, u, count):
    x = to_box(obj, u)
    stream = point_stream(state.seed, len(state.points))
    state.points.append(initial_measure(obj, x, count, stream))
    state.unit = np.vstack([state.unit, u[None]])
    state.keys.add(tuple(u.tolist()))


def initialize(obj, params, user_points=(), seed=0, samples=None, algorithm="alpha_dogs"):
    """Initial state: the ``2**n`` box vertices plus quantized user points.

    Parameters
    ----------
    obj : StochasticObjective
    params : AlphaDogsParams
    user_points : sequence of array_like
        Extra starting points in the objective's own coordinates.
    seed : int
    samples : int, optional
        Samples per initial point; defaults to ``params.N0``.
    """
    n = obj.dimension
    if n > MAX_DIMENSION:
        raise UnsupportedDimension(f"dimension {n} exceeds the supported maximum of {MAX_DIMENSION}")
    grid = GridLevel(params.ell0, (0.0,) * n, (1.0,) * n)
    units = [u for u in box_vertices(n)]
    for x in user_points:
        u = to_unit(obj, np.atleast_1d(x))
        # absorb round-off from the box mapping; genuinely outside points still fail
        u = np.where(np.abs(u - np.clip(u, 0.0, 1.0)) <= 1e-12, np.clip(u, 0.0, 1.0), u)
        units.append(quantize(grid, u))
    state = OptimizerState([], np.empty((0, n)), params.ell0, 0, params.alpha0, params.K0,
                           None, int(seed), algorithm)
    count = params.N0 if samples is None else samples
    for u in units:
        if tuple(u.tolist()) not in state.keys:
            _add_point(state, obj, u, count)
    state.triangulation = build_triangulation(state.unit)
    return state


def candidate(state, obj=None):
    """Point minimizing ``y + alpha * sigma``, with its regret when the truth is known."""
    score = state.measurements + state.alpha * state.sigmas
    k = int(np.argmin(score))
    point = state.points[k]
    regret = ref = None
    if obj is not None:
        ref = obj.uncertainty.sigma(state.total_samples)
        fx = obj.truth(point.location)
        if fx is not None and obj.optimum_value is not None:
            regret = float(fx - obj.optimum_value)
    return CandidateReport(k, point, regret, ref)


def _record(state, obj, branch):
    rep = candidate(state, obj)
    if rep.regret is not None:
        state.best_regret = rep.regret if state.best_regret is None else min(state.best_regret, rep.regret)
    total = state.total_samples
    return IterationRecord(
        iteration=state.iteration,
        branch=branch,
        point_count=len(state.points),
        cumulative_samples=total,
        averaging_time=total * obj.uncertainty.sample_interval,
        candidate=[float(v) for v in rep.candidate.location],
        candidate_y=float(rep.candidate.measurement),
        candidate_sigma=float(rep.candidate.sigma),
        regret=rep.regret,
        best_regret=state.best_regret,
        reference_error=float(rep.reference_error),
        alpha=float(state.alpha),
        K=float(state.K),
        level=int(state.level),
    )


def _fit_scaled(state, params, zero_sigma=False, rho_guess=None):
    # the fit is equivariant under joint scaling of (y, sigma), so fit raw data
    y = state.measurements
    s = np.zeros_like(y) if zero_sigma else state.sigmas
    if state.system is None or not state.system.matches(state.unit):
        state.system = SplineSystem(state.unit)
    model = fit(WeightedDataset(state.unit, y, s), params.beta_strict, rho_guess, state.system)
    rs = measurement_scale(y, params.scale_lower, params.scale_upper)
    return model, scaled(model, rs), rs * y, rs * s


def step(state, obj, params):
    """One iteration of the main loop; mutates ``state`` and returns its record."""
    raw, model, ys, ss = _fit_scaled(state, params, rho_guess=state.rho)
    if 0 < raw.rho < math.inf:
        state.rho = raw.rho
    ctx = SearchContext(model, state.triangulation, state.K, state.alpha, ys, ss)
    z, sc = continuous_search(ctx)
    j, sd = discrete_search(ctx)
    zq = quantize(state.grid, np.clip(z, 0.0, 1.0))
    is_new = tuple(zq.tolist()) not in state.keys
    branch = classify_iteration(sc, j, sd, state.sample_counts, params.gamma, state.level, is_new, zq)

    if isinstance(branch, Supplemental):
        state.points[j] = supplemental_measure(state.points[j], obj, params.N_delta)
        name = "supplemental"
    elif isinstance(branch, Identifying):
        _add_point(state, obj, zq, params.N0)
        state.triangulation.insert(zq)
        name = "identifying"
    else:
        state.refinements += 1
        i = state.refinements
        state.level = params.ell0 + i
        state.alpha = params.alpha0 + i * params.alpha_delta
        state.K = params.K0 * 2.0**i
        name = "refinement"
    state.iteration += 1
    return _record(state, obj, name)


def delta_step(state, obj, params, samples_per_point):
    """One iteration of the fixed-sampling baseline (interpolation, fixed ``K``)."""
    _, model, ys, zeros = _fit_scaled(state, params, zero_sigma=True)
    ctx = SearchContext(model, state.triangulation, state.K, 0.0, ys, zeros)
    z, _ = continuous_search(ctx)
    zq = quantize(state.grid, np.clip(z, 0.0, 1.0))
    if tuple(zq.tolist()) not in state.keys:
        _add_point(state, obj, zq, samples_per_point)
        state.triangulation.insert(zq)
        name = "identifying"
    else:
        state.refinements += 1
        state.level = params.ell0 + state.refinements
        name = "refinement"
    state.iteration += 1
    return _record(state, obj, name)


def satisfied_point(state, obj, rule):
    """Index of a point meeting the tolerance rule, or ``None``."""
    if not rule.uses_tolerance:
        return None
    if obj.optimum_value is None:
        raise ValueError("tolerance stopping needs a known optimum value")
    ok = (np.abs(state.measurements - obj.optimum_value) <= rule.measure_tol) & (state.sigmas <= rule.sigma_tol)
    hits = np.nonzero(ok)[0]
    return int(hits[0]) if hits.size else None


def _loop(state, obj, rule, history, advance):
    while True:
        if satisfied_point(state, obj, rule) is not None:
            return state, history
        capped = (rule.max_iterations is not None and state.iteration >= rule.max_iterations) or (
            rule.max_total_samples is not None and state.total_samples >= rule.max_total_samples)
        if capped:
            if rule.uses_tolerance:
                raise BudgetExhausted("budget exhausted before reaching the tolerance", state, history)
            return state, history
        history.append(advance(state))


def run(obj, params=None, stopping=None, seed=0, user_points=(), state=None, history=None):
    """Run alpha-DOGS until the stopping rule fires.

    Pass a previous ``state`` and ``history`` to resume.

    Returns
    -------
    (OptimizerState, list of IterationRecord)
    """
    params = params or AlphaDogsParams()
    if state is None:
        state = initialize(obj, params, user_points, seed)
        history = [_record(state, obj, "init")]
    return _loop(state, obj, stopping, history, lambda s: step(s, obj, params))


def run_delta_dogs(obj, params=None, stopping=None, seed=0, samples_per_point=None, K=None,
                   user_points=(), state=None, history=None):
    """Run the baseline: every point gets ``samples_per_point`` samples and
    the surrogate interpolates the measurements.

    ``K`` stays fixed (default ``params.K0``); a quantization collision refines
    the grid.
    """
    params = params or AlphaDogsParams()
    count = params.N0 if samples_per_point is None else int(samples_per_point)
    if state is None:
        state = initialize(obj, params, user_points, seed, samples=count, algorithm="delta_dogs")
        state.K = params.K0 if K is None else float(K)
        history = [_record(state, obj, "init")]
    return _loop(state, obj, stopping, history, lambda s: delta_step(s, obj, params, count))


def state_to_dict(state, obj):
    """Lossless JSON-ready snapshot of ``state``."""
    return {
        "version": SNAPSHOT_VERSION,
        "algorithm": state.algorithm,
        "seed": state.seed,
        "iteration": state.iteration,
        "level": state.level,
        "refinements": state.refinements,
        "alpha": state.alpha,
        "K": state.K,
        "rho": state.rho,
        "best_regret": state.best_regret,
        "unit": state.unit.tolist(),
        "simplices": state.triangulation.simplices.tolist(),
        "points": [
            {
                "location": p.location.tolist(),
                "sample_count": p.sample_count,
                "running_sum": p.running_sum,
                "sigma": p.sigma,
                "resume_state": obj.encode_state(p.resume_state),
                "stream": encode_stream(p.stream),
            }
            for p in state.points
        ],
    }


def state_from_dict(data, obj):
    if data.get("version") != SNAPSHOT_VERSION:
        raise ValueError("unsupported snapshot version")
    points = [
        EvaluatedPoint(np.array(p["location"], float), int(p["sample_count"]), float(p["running_sum"]),
                       float(p["sigma"]), obj.decode_state(p["resume_state"]), decode_stream(p["stream"]))
        for p in data["points"]
    ]
    unit = np.array(data["unit"], dtype=float)
    tri = Triangulation.restore(unit, np.array(data["simplices"], dtype=np.int64))
    return OptimizerState(points, unit, int(data["level"]), int(data["refinements"]), float(data["alpha"]),
                          float(data["K"]), tri, int(data["seed"]), data["algorithm"], int(data["iteration"]),
                          data["rho"], data["best_regret"])
