import json

import numpy as np
import pytest

from alphadogs.geometry import UnsupportedDimension
from alphadogs.optimizer import (
    AlphaDogsParams,
    BudgetExhausted,
    StoppingRule,
    candidate,
    initialize,
    reference_error,
    run,
    run_delta_dogs,
    state_from_dict,
    state_to_dict,
    step,
)
from alphadogs.problems import SyntheticProblem
from alphadogs.sampling import EvaluatedPoint

TUNED = AlphaDogsParams(K0=4.0, gamma=10.0)


def test_defaults():
    p = AlphaDogsParams()
    assert (p.alpha0, p.alpha_delta, p.K0, p.ell0, p.beta_strict, p.gamma, p.N0, p.N_delta) == (
        0.5, 0.5, 0.5, 3, 4.0, 100.0, 1, 1)
    with pytest.raises(ValueError):
        AlphaDogsParams(K0=0)
    with pytest.raises(ValueError):
        AlphaDogsParams(gamma=0.5)
    with pytest.raises(ValueError):
        AlphaDogsParams(N0=1.5)


def test_initialize_vertices():
    st = initialize(SyntheticProblem("parabola", 2), AlphaDogsParams())
    assert len(st.points) == 4 and st.total_samples == 4
    assert sorted(map(tuple, st.unit.tolist())) == [(0, 0), (0, 1), (1, 0), (1, 1)]


def test_initialize_user_points():
    obj = SyntheticProblem("parabola", 1)
    st = initialize(obj, AlphaDogsParams(), user_points=[[0.3]])
    assert sorted(st.unit[:, 0]) == [0.0, 0.25, 1.0]
    st = initialize(obj, AlphaDogsParams(), user_points=[[1.0], [0.0]])
    assert len(st.points) == 2
    with pytest.raises(ValueError):
        initialize(obj, AlphaDogsParams(), user_points=[[1.2]])
    with pytest.raises(UnsupportedDimension):
        initialize(SyntheticProblem("parabola", 7), AlphaDogsParams())


def test_reference_error():
    assert reference_error(0.3, 9) == pytest.approx(0.1)
    assert reference_error(0.3, 1) == 0.3
    assert reference_error(0.3, 10) < reference_error(0.3, 9)
    with pytest.raises(ValueError):
        reference_error(0.3, 0)


def test_candidate_examples():
    st = initialize(SyntheticProblem("parabola", 1), AlphaDogsParams())
    st.alpha = 1.0
    st.points = [EvaluatedPoint(np.array([0.0]), 1, 1.0, 0.1), EvaluatedPoint(np.array([1.0]), 1, 0.95, 0.2)]
    assert candidate(st).index == 0
    st.points = st.points[:1]
    assert candidate(st).index == 0


def test_max_iterations_zero():
    st, hist = run(SyntheticProblem("parabola", 1), TUNED, StoppingRule(max_iterations=0))
    assert len(hist) == 1 and hist[0].branch == "init"


def check_history(obj, params, st, hist):
    prev = hist[0]
    best = np.inf
    for rec in hist[1:]:
        assert rec.iteration == prev.iteration + 1
        grow = rec.cumulative_samples - prev.cumulative_samples
        if rec.branch == "supplemental":
            assert grow == params.N_delta and rec.point_count == prev.point_count
        elif rec.branch == "identifying":
            assert grow == params.N0 and rec.point_count == prev.point_count + 1
        else:
            assert rec.branch == "refinement"
            assert grow == 0 and rec.point_count == prev.point_count
            assert rec.level == prev.level + 1
        i = rec.level - params.ell0
        assert rec.alpha == params.alpha0 + i * params.alpha_delta
        assert rec.K == params.K0 * 2.0**i
        assert rec.regret >= 0
        best = min(best, rec.regret)
        assert rec.best_regret == best or rec.best_regret <= prev.best_regret
        prev = rec
    assert st.total_samples == sum(p.sample_count for p in st.points) == hist[-1].cumulative_samples


def test_run_invariants_1d():
    obj = SyntheticProblem("parabola", 1)
    st, hist = run(obj, TUNED, StoppingRule(max_iterations=600), seed=3)
    check_history(obj, TUNED, st, hist)
    assert any(r.branch == "refinement" for r in hist)
    # every point sits on the current grid
    scaled = st.unit * 2**st.level
    np.testing.assert_array_equal(scaled, np.rint(scaled))


def test_run_invariants_2d_defaults():
    obj = SyntheticProblem("parabola", 2)
    params = AlphaDogsParams()
    st, hist = run(obj, params, StoppingRule(max_iterations=150), seed=1)
    check_history(obj, params, st, hist)


def test_supplemental_gate():
    obj = SyntheticProblem("parabola", 1)
    params = AlphaDogsParams(K0=4.0, gamma=2.0)
    st = initialize(obj, params, seed=0)
    for _ in range(200):
        before = st.sample_counts.copy()
        cap = params.gamma * 2**st.level
        rec = step(st, obj, params)
        if rec.branch == "supplemental":
            j = int(np.argmax(st.sample_counts[:len(before)] - before))
            assert before[j] < cap


def test_concentrates_near_minimum():
    hits = 0
    for seed in range(5):
        st, _ = run(SyntheticProblem("parabola", 1), TUNED, StoppingRule(max_total_samples=800), seed=seed)
        k = int(np.argmax(st.sample_counts))
        hits += abs(st.points[k].location[0] - 0.3) <= 0.15
    assert hits >= 4


def test_tolerance_stop_and_budget():
    obj = SyntheticProblem("parabola", 1)
    st, hist = run(obj, TUNED, StoppingRule(max_total_samples=5000, measure_tol=0.05, sigma_tol=0.05), seed=0)
    ok = (np.abs(st.measurements) <= 0.05) & (st.sigmas <= 0.05)
    assert ok.any()
    with pytest.raises(BudgetExhausted) as err:
        run(obj, TUNED, StoppingRule(max_iterations=5, measure_tol=1e-6, sigma_tol=1e-6))
    assert len(err.value.history) == 6


def test_determinism():
    obj = SyntheticProblem("parabola", 2)
    a = run(obj, TUNED, StoppingRule(max_iterations=150), seed=9)[1]
    b = run(obj, TUNED, StoppingRule(max_iterations=150), seed=9)[1]
    c = run(obj, TUNED, StoppingRule(max_iterations=150), seed=10)[1]
    assert [r.to_dict() for r in a] == [r.to_dict() for r in b]
    assert [r.to_dict() for r in a] != [r.to_dict() for r in c]


@pytest.mark.parametrize("n", [1, 2])
def test_snapshot_resume(n):
    obj = SyntheticProblem("parabola", n)
    full_state, full = run(obj, TUNED, StoppingRule(max_iterations=400), seed=2)
    half_state, half = run(obj, TUNED, StoppingRule(max_iterations=200), seed=2)
    data = json.loads(json.dumps(state_to_dict(half_state, obj)))
    back = state_from_dict(data, obj)
    assert state_to_dict(back, obj) == data
    st, hist = run(obj, TUNED, StoppingRule(max_iterations=400), state=back, history=list(half))
    assert [r.to_dict() for r in hist] == [r.to_dict() for r in full]
    assert state_to_dict(st, obj) == state_to_dict(full_state, obj)


def test_delta_dogs_deterministic_parabola():
    obj = SyntheticProblem("parabola", 1, noise_sigma=0.0)
    st, hist = run_delta_dogs(obj, AlphaDogsParams(), StoppingRule(max_iterations=40), K=4.0)
    best = st.points[int(np.argmin(st.measurements))].location[0]
    assert abs(best - 0.3) <= 2.0**-st.level
    for prev, rec in zip(hist, hist[1:]):
        if rec.branch == "refinement":
            assert rec.level == prev.level + 1 and rec.K == 4.0
    assert all(p.sample_count == 1 for p in st.points)


def test_delta_dogs_fixed_samples():
    obj = SyntheticProblem("parabola", 1)
    st, hist = run_delta_dogs(obj, AlphaDogsParams(), StoppingRule(max_iterations=10), samples_per_point=7)
    assert st.total_samples == 7 * len(st.points)
    assert hist[-1].cumulative_samples == st.total_samples
