"""Measurements of time-averaged objectives.

A measurement at ``x`` is the finite-sample estimate ``y(x, N)`` of the
infinite-time average ``f(x)``.  Every evaluated point owns a random stream
and an objective-specific resume state, so that extra samples continue the
same realization instead of restarting it.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class SamplerFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class UncertaintyModel:
    """``sigma(N) = scale * (N * sample_interval) ** -theta``.

    ``kind`` is ``"iid"`` (``scale`` is the single-sample standard deviation)
    or ``"empirical_sqrt"`` (``scale`` is the fitted ``A`` of ``A / sqrt(T)``
    with ``T = N * sample_interval``).
    """

    kind: str = "iid"
    scale: float = 0.3
    theta: float = 0.5
    sample_interval: float = 1.0

    def __post_init__(self):
        if self.kind not in ("iid", "empirical_sqrt"):
            raise ValueError(f"unknown uncertainty model {self.kind!r}")
        if self.scale < 0 or not 0 < self.theta <= 1 or self.sample_interval <= 0:
            raise ValueError("invalid uncertainty model parameters")

    def sigma(self, count):
        if count < 1:
            raise ValueError("sample count must be at least 1")
        return self.scale * (count * self.sample_interval) ** (-self.theta)


@dataclass
class MeanState:
    count: int = 0
    total: float = 0.0


class StochasticObjective:
    """Source of samples ``g(x, k)`` whose long-run average is ``f(x)``.

    Subclasses implement ``start``, ``advance`` and ``estimate``.  ``truth``
    returns ``None`` when ``f`` is not known in closed form.
    """

    dimension = 1
    lower = None
    upper = None
    uncertainty = UncertaintyModel()
    optimum_value = None
    optimum_location = None

    def start(self, x, stream):
        """Fresh resume state at ``x`` (any transient is consumed here)."""
        return MeanState()

    def advance(self, x, state, stream, count):
        raise NotImplementedError

    def estimate(self, state):
        return state.total / state.count

    def truth(self, x):
        return None

    def encode_state(self, state):
        return {"count": state.count, "total": state.total}

    def decode_state(self, data):
        return MeanState(int(data["count"]), float(data["total"]))


class SampleMeanObjective(StochasticObjective):
    """Objective whose measurement is the plain mean of drawn samples.

    Parameters
    ----------
    draw : callable
        ``draw(x, stream, count)`` returns ``count`` samples at ``x``.
    """

    def __init__(self, draw, dimension, lower=None, upper=None, uncertainty=None, truth=None):
        self._draw = draw
        self._truth = truth
        self.dimension = dimension
        self.lower = np.zeros(dimension) if lower is None else np.asarray(lower, float)
        self.upper = np.ones(dimension) if upper is None else np.asarray(upper, float)
        if uncertainty is not None:
            self.uncertainty = uncertainty

    def draw(self, x, stream, count):
        return self._draw(x, stream, count)

    def advance(self, x, state, stream, count):
        try:
            g = np.asarray(self.draw(x, stream, count), dtype=float)
        except SamplerFailure:
            raise
        except Exception as exc:
            raise SamplerFailure(str(exc)) from exc
        if g.shape != (count,) or not np.all(np.isfinite(g)):
            raise SamplerFailure("sampler returned invalid samples")
        return MeanState(state.count + count, state.total + float(g.sum()))

    def truth(self, x):
        return None if self._truth is None else float(self._truth(np.asarray(x, float)))


def point_stream(seed, index):
    """Independent counter-based generator for point ``index`` of a run seeded with ``seed``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(index)])))


def encode_stream(stream):
    st = stream.bit_generator.state

    def conv(v):
        if isinstance(v, dict):
            return {k: conv(u) for k, u in v.items()}
        if isinstance(v, np.ndarray):
            return [int(u) for u in v]
        return v

    return conv(st)


def decode_stream(data):
    st = {
        "bit_generator": data["bit_generator"],
        "state": {k: np.array(v, dtype=np.uint64) for k, v in data["state"].items()},
        "buffer": np.array(data["buffer"], dtype=np.uint64),
        "buffer_pos": data["buffer_pos"],
        "has_uint32": data["has_uint32"],
        "uinteger": data["uinteger"],
    }
    bg = np.random.Philox()
    bg.state = st
    return np.random.Generator(bg)


@dataclass
class EvaluatedPoint:
    """A measured location with its running statistics.

    ``measurement * sample_count == running_sum`` always holds; for objectives
    whose estimate is not a plain mean (e.g. functions of trajectory
    averages) ``running_sum`` is defined through that identity.
    """

    location: np.ndarray
    sample_count: int
    running_sum: float
    sigma: float
    resume_state: object = None
    stream: object = field(default=None, repr=False)

    @property
    def measurement(self):
        return self.running_sum / self.sample_count


def _refresh(obj, x, state, stream):
    n = state.count
    y = float(obj.estimate(state))
    if not np.isfinite(y):
        raise SamplerFailure("non-finite measurement")
    return EvaluatedPoint(np.array(x, dtype=float), n, y * n, obj.uncertainty.sigma(n), state, stream)


def initial_measure(obj, x, n0, stream):
    """First measurement at ``x`` with ``n0`` samples (after any transient)."""
    if n0 < 1:
        raise ValueError("n0 must be at least 1")
    x = np.asarray(x, dtype=float)
    if obj.lower is not None and (np.any(x < obj.lower) or np.any(x > obj.upper)):
        raise ValueError(f"{x.tolist()} is outside the feasible box")
    state = obj.start(x, stream)
    state = obj.advance(x, state, stream, int(n0))
    return _refresh(obj, x, state, stream)


def supplemental_measure(point, obj, n_delta):
    """Continue sampling ``point`` for ``n_delta`` more samples."""
    if n_delta < 1:
        raise ValueError("n_delta must be at least 1")
    state = obj.advance(point.location, point.resume_state, point.stream, int(n_delta))
    return _refresh(obj, point.location, state, point.stream)


@dataclass(frozen=True)
class UQFit:
    model: UncertaintyModel
    probe_lengths: np.ndarray
    empirical_std: np.ndarray
    fitted_std: np.ndarray
    ensemble: int
    low_confidence: bool

    @property
    def relative_residuals(self):
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.abs(self.fitted_std - self.empirical_std) / self.empirical_std
        return np.where(self.empirical_std > 0, r, 0.0)


LOW_CONFIDENCE_ENSEMBLE = 10


def fit_uq_model(obj, ensemble, probe_lengths, x=None, seed=0, theta=0.5):
    """Fit ``A`` in ``sigma = A / T**theta`` from an ensemble of independent runs.

    Parameters
    ----------
    obj : StochasticObjective
    ensemble : int
        Number of independent realizations (at least 2).
    probe_lengths : sequence of float
        Increasing averaging lengths in the objective's time units
        (``T = N * sample_interval``).
    x : array_like, optional
        Location to probe; defaults to the center of the box.
    seed : int
        Master seed; member ``m`` uses stream ``(seed, m)``.

    Returns
    -------
    UQFit
    """
    if ensemble < 2:
        raise ValueError("ensemble must be at least 2")
    probes = np.asarray(probe_lengths, dtype=float)
    if probes.size == 0 or np.any(np.diff(probes) <= 0) or probes[0] <= 0:
        raise ValueError("probe_lengths must be nonempty, positive and increasing")
    h = obj.uncertainty.sample_interval
    counts = np.maximum(np.rint(probes / h).astype(int), 1)
    if np.any(np.diff(counts) <= 0):
        raise ValueError("probe lengths collapse to equal sample counts")
    if x is None:
        x = 0.5 * (np.asarray(obj.lower, float) + np.asarray(obj.upper, float))
    x = np.asarray(x, dtype=float)

    est = np.empty((ensemble, len(counts)))
    for m in range(ensemble):
        stream = point_stream(seed, m)
        state = obj.start(x, stream)
        done = 0
        for k, c in enumerate(counts):
            state = obj.advance(x, state, stream, int(c - done))
            done = c
            est[m, k] = obj.estimate(state)
    std = est.std(axis=0, ddof=1)
    t = counts * h
    basis = t ** (-theta)
    pos = std > 0
    if not np.any(pos):
        a = 0.0
    else:
        # least squares on the relative misfit (A basis - std) / std
        u = basis[pos] / std[pos]
        a = float(u.sum() / (u * u).sum())
    model = UncertaintyModel("empirical_sqrt", a, theta, h)
    return UQFit(model, t, std, a * basis, ensemble, ensemble < LOW_CONFIDENCE_ENSEMBLE)
