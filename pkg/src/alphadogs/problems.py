"""Test objectives: noisy parabola and Schwefel functions, and Lorenz parameter estimation."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np
from scipy.optimize import minimize_scalar

from .sampling import SampleMeanObjective, SamplerFailure, StochasticObjective, UncertaintyModel

NOISE_SIGMA = 0.3
SCHWEFEL_OFFSET = 0.83797
SCHWEFEL_SCALE = 500.0


def parabola(x):
    """``(5/n) sum (x_i - 0.3)^2``; minimum 0 at ``x_i = 0.3``."""
    x = np.asarray(x, dtype=float)
    return 5.0 / x.shape[-1] * np.sum((x - 0.3) ** 2, axis=-1)


def schwefel(x):
    """Schwefel function rescaled from ``[-500, 500]`` to ``[0, 1]``.

    ``0.83797 - (1/n) sum x_i sin(sqrt(500 |x_i|))``, minimum near 0 at
    ``x_i = 0.8419``.
    """
    x = np.asarray(x, dtype=float)
    return SCHWEFEL_OFFSET - np.mean(x * np.sin(np.sqrt(SCHWEFEL_SCALE * np.abs(x))), axis=-1)


def _schwefel_argmin():
    res = minimize_scalar(lambda t: -t * math.sin(math.sqrt(SCHWEFEL_SCALE * t)),
                          bounds=(0.8, 0.9), method="bounded", options={"xatol": 1e-12})
    return float(res.x), float(schwefel([res.x]))


SCHWEFEL_ARGMIN, SCHWEFEL_MIN = _schwefel_argmin()

SYNTHETIC = {
    "parabola": (parabola, lambda n: np.full(n, 0.3), 0.0),
    "schwefel": (schwefel, lambda n: np.full(n, SCHWEFEL_ARGMIN), SCHWEFEL_MIN),
}


class SyntheticProblem(SampleMeanObjective):
    """``g(x, k) = f(x) + v_k`` with ``v_k ~ N(0, noise_sigma**2)`` on ``[0, 1]^n``."""

    def __init__(self, kind, dimension, noise_sigma=NOISE_SIGMA):
        if kind not in SYNTHETIC:
            raise ValueError(f"unknown synthetic problem {kind!r}")
        if dimension < 1:
            raise ValueError("dimension must be at least 1")
        self.kind = kind
        self.noise_sigma = float(noise_sigma)
        f, xstar, fstar = SYNTHETIC[kind]
        self.f = f
        self.optimum_location = xstar(dimension)
        self.optimum_value = fstar
        super().__init__(None, dimension, uncertainty=UncertaintyModel("iid", self.noise_sigma), truth=f)

    def draw(self, x, stream, count):
        fx = float(self.f(x))
        if self.noise_sigma == 0:
            return np.full(count, fx)
        return fx + self.noise_sigma * stream.standard_normal(count)


# Lorenz system

LORENZ_S = 10.0
LORENZ_H = 0.05
LORENZ_TRANSIENT = 2600
LORENZ_TARGETS = (23.57, 8.67)
LORENZ_LOWER = (24.0, 1.8)
LORENZ_UPPER = (29.15, 4.0)
LORENZ_T0 = 20.0
LORENZ_T1 = 7.0
LORENZ_T_FIXED = 2513.0
LORENZ_A = 0.02 * math.sqrt(LORENZ_T_FIXED)
LORENZ_X0 = (0.0, 1.0, 1.05)
LORENZ_X0_SPREAD = 0.5


class NonFiniteState(SamplerFailure):
    pass


@dataclass(frozen=True)
class OdeState:
    """Lorenz state plus accumulators over the averaging window.

    ``steps`` counts averaged steps only; the transient is not included.
    """

    x: float
    y: float
    z: float
    t: float = 0.0
    steps: int = 0
    sum_z: float = 0.0
    sum_z2: float = 0.0

    @property
    def count(self):
        return self.steps


def lorenz_rhs(u, rho_lorenz, beta_lorenz, s=LORENZ_S):
    x, y, z = u
    return np.array([s * (y - x), x * (rho_lorenz - z) - y, x * y - beta_lorenz * z])


def rk4_step(state, params, h):
    """One classical RK4 step of the Lorenz equations.

    Parameters
    ----------
    state : OdeState
    params : tuple
        ``(rho_lorenz, beta_lorenz, s)``.
    h : float

    Returns
    -------
    OdeState
        Advanced state; the averaging accumulators are carried unchanged.
    """
    rho_l, beta_l, s = params
    u = np.array([state.x, state.y, state.z])
    k1 = lorenz_rhs(u, rho_l, beta_l, s)
    k2 = lorenz_rhs(u + 0.5 * h * k1, rho_l, beta_l, s)
    k3 = lorenz_rhs(u + 0.5 * h * k2, rho_l, beta_l, s)
    k4 = lorenz_rhs(u + h * k3, rho_l, beta_l, s)
    u = u + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(u)):
        raise NonFiniteState("Lorenz state diverged")
    return OdeState(float(u[0]), float(u[1]), float(u[2]), state.t + h, state.steps, state.sum_z, state.sum_z2)


@numba.njit(cache=True)
def _lorenz_run(x, y, z, rho_l, beta_l, s, h, nsteps, sum_z, sum_z2, accumulate):
    for _ in range(nsteps):
        k1x = s * (y - x)
        k1y = x * (rho_l - z) - y
        k1z = x * y - beta_l * z
        ax = x + 0.5 * h * k1x
        ay = y + 0.5 * h * k1y
        az = z + 0.5 * h * k1z
        k2x = s * (ay - ax)
        k2y = ax * (rho_l - az) - ay
        k2z = ax * ay - beta_l * az
        ax = x + 0.5 * h * k2x
        ay = y + 0.5 * h * k2y
        az = z + 0.5 * h * k2z
        k3x = s * (ay - ax)
        k3y = ax * (rho_l - az) - ay
        k3z = ax * ay - beta_l * az
        ax = x + h * k3x
        ay = y + h * k3y
        az = z + h * k3z
        k4x = s * (ay - ax)
        k4y = ax * (rho_l - az) - ay
        k4z = ax * ay - beta_l * az
        x = x + h / 6.0 * (k1x + 2.0 * k2x + 2.0 * k3x + k4x)
        y = y + h / 6.0 * (k1y + 2.0 * k2y + 2.0 * k3y + k4y)
        z = z + h / 6.0 * (k1z + 2.0 * k2z + 2.0 * k3z + k4z)
        if accumulate:
            sum_z += z
            sum_z2 += z * z
    return x, y, z, sum_z, sum_z2


def integrate(state, params, h, nsteps, accumulate=True):
    """Advance ``state`` by ``nsteps`` RK4 steps, optionally adding each new ``Z`` to the window."""
    rho_l, beta_l, s = params
    x, y, z, sz, sz2 = _lorenz_run(state.x, state.y, state.z, float(rho_l), float(beta_l), float(s),
                                   float(h), int(nsteps), state.sum_z, state.sum_z2, accumulate)
    if not all(math.isfinite(v) for v in (x, y, z, sz, sz2)):
        raise NonFiniteState("Lorenz state diverged")
    steps = state.steps + (nsteps if accumulate else 0)
    return OdeState(x, y, z, state.t + nsteps * h, steps, sz, sz2)


def window_statistics(state):
    """Finite-window mean and (population) standard deviation of ``Z``."""
    n = state.steps
    mean = state.sum_z / n
    var = max(state.sum_z2 / n - mean * mean, 0.0)
    return mean, math.sqrt(var)


class LorenzProblem(StochasticObjective):
    """Recover ``(rho_lorenz, beta_lorenz)`` from long-time statistics of ``Z``.

    The cost is ``|mean(Z) - 23.57| + |std(Z) - 8.67|`` over the averaging
    window.  One sample is one timestep, so ``N`` samples are ``T = N h``
    time units.

    Parameters
    ----------
    A : float
        Scale of the ``A / sqrt(T)`` uncertainty model.
    """

    dimension = 2

    def __init__(self, A=LORENZ_A, s=LORENZ_S, h=LORENZ_H, transient_steps=LORENZ_TRANSIENT,
                 targets=LORENZ_TARGETS, lower=LORENZ_LOWER, upper=LORENZ_UPPER,
                 x0=LORENZ_X0, x0_spread=LORENZ_X0_SPREAD):
        self.s = float(s)
        self.h = float(h)
        self.transient_steps = int(transient_steps)
        self.targets = tuple(float(v) for v in targets)
        self.lower = np.asarray(lower, dtype=float)
        self.upper = np.asarray(upper, dtype=float)
        self.x0 = np.asarray(x0, dtype=float)
        self.x0_spread = float(x0_spread)
        self.uncertainty = UncertaintyModel("empirical_sqrt", float(A), 0.5, self.h)
        # targets are generated at this optimum, so the minimum cost is 0
        self.optimum_value = 0.0

    def initial_condition(self, stream):
        return self.x0 + stream.uniform(-self.x0_spread, self.x0_spread, 3)

    def start(self, x, stream):
        u = self.initial_condition(stream)
        state = OdeState(float(u[0]), float(u[1]), float(u[2]))
        return integrate(state, (x[0], x[1], self.s), self.h, self.transient_steps, accumulate=False)

    def advance(self, x, state, stream, count):
        return integrate(state, (x[0], x[1], self.s), self.h, count)

    def estimate(self, state):
        mean, std = window_statistics(state)
        return abs(mean - self.targets[0]) + abs(std - self.targets[1])

    def encode_state(self, state):
        return {"x": state.x, "y": state.y, "z": state.z, "t": state.t, "steps": state.steps,
                "sum_z": state.sum_z, "sum_z2": state.sum_z2}

    def decode_state(self, data):
        return OdeState(float(data["x"]), float(data["y"]), float(data["z"]), float(data["t"]),
                        int(data["steps"]), float(data["sum_z"]), float(data["sum_z2"]))

    def samples_for(self, T):
        return int(round(T / self.h))


def lorenz_cost_sample(problem, x, resume, added_T, stream=None):
    """Extend the trajectory at ``x`` by ``added_T`` time units and return the cost estimate.

    ``resume`` is ``None`` for a fresh trajectory (the transient is discarded
    first), otherwise the state returned by a previous call.
    """
    n = added_T / problem.h
    if n < 1 or abs(n - round(n)) > 1e-9:
        raise ValueError("added_T must be a positive multiple of h")
    x = np.asarray(x, dtype=float)
    if resume is None:
        if stream is None:
            raise ValueError("a fresh trajectory needs a random stream")
        resume = problem.start(x, stream)
    state = problem.advance(x, resume, stream, int(round(n)))
    return problem.estimate(state), state


def make_problem(name, dimension=None, **kwargs):
    if name in SYNTHETIC:
        return SyntheticProblem(name, 1 if dimension is None else dimension, **kwargs)
    if name == "lorenz":
        if dimension not in (None, 2):
            raise ValueError("the Lorenz problem is two-dimensional")
        return LorenzProblem(**kwargs)
    raise ValueError(f"unknown problem {name!r}")


PROBLEMS = tuple(SYNTHETIC) + ("lorenz",)
