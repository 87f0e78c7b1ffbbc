import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hbopid import gp
from hbopid.noisemodel import predict_sigma
from hbopid.optimizer import (
    Evaluation,
    FreeParameter,
    HboConfig,
    ObjectiveFailure,
    SearchSpace,
    bo_run,
    candidate_set,
    check_monotone,
    expected_improvement,
    hbo_run,
    load_trials,
    propose_next,
    rs_run,
    select_candidate,
    two_stage_run,
)
from oracles import ei_closed_form, ei_monte_carlo

LINE = SearchSpace((FreeParameter(("pos_xy",), "kp", 0.0, 1.0),))
FAST = HboConfig(n_init=5, n_iter=8, n_candidates=512, n_local=64, output_transform="none")


def quadratic(x, rng):
    return (x[0] - 0.3) ** 2


def noisy(x, rng):
    return 1.0 + (x[0] - 0.6) ** 2 + 0.05 * rng.normal()


def trial_key(t):
    d = t.to_dict()
    d.pop("wall_time", None)
    return d


def traces_equal(a, b):
    return [trial_key(t) for t in a.trials] == [trial_key(t) for t in b.trials]


# acquisition


def test_ei_at_incumbent():
    assert expected_improvement(2.0, 1.0, 2.0) == pytest.approx(0.3989423, abs=1e-6)


def test_ei_degenerate_sigma():
    assert expected_improvement(3.0, 0.0, 2.0) == 0.0
    assert expected_improvement(1.0, 0.0, 2.0) == 1.0


def test_ei_worked_example():
    assert expected_improvement(1.0, 0.5, 2.0) == pytest.approx(1.00425, abs=1e-5)


@pytest.mark.parametrize("seed", range(3))
def test_ei_matches_monte_carlo(seed):
    rng = np.random.default_rng(seed)
    mu, sigma, e = rng.normal(), rng.uniform(0.1, 2.0), rng.normal()
    assert expected_improvement(mu, sigma, e) == pytest.approx(ei_monte_carlo(mu, sigma, e, seed=seed), abs=1e-3)


@given(st.floats(-10, 10), st.floats(0, 10), st.floats(-10, 10))
def test_ei_matches_closed_form_and_is_nonnegative(mu, sigma, e):
    ei = expected_improvement(mu, sigma, e)
    assert ei >= 0
    assert ei == pytest.approx(ei_closed_form(mu, sigma, e), rel=1e-9, abs=1e-12)


@given(st.floats(0.01, 5), st.floats(0.05, 10), st.floats(0.01, 3))
def test_ei_increases_with_sigma_above_incumbent(gap, ratio, ds):
    # ratio keeps gap / sigma <= 20, where EI is still representable in float64
    s1 = gap * ratio
    assert expected_improvement(gap, s1 + ds, 0.0) > expected_improvement(gap, s1, 0.0)


def test_ei_rejects_negative_sigma():
    with pytest.raises(ValueError):
        expected_improvement(0.0, -1.0, 0.0)


def test_tie_goes_to_lower_mean_then_index():
    assert select_candidate([0.5, 0.5, 0.1], [1.0, 0.2, 0.0], [1, 1, 1]) == 1
    assert select_candidate([0.5, 0.5], [0.2, 0.2], [1, 1]) == 0


def test_zero_ei_falls_back_to_max_sigma():
    assert select_candidate([0.0, 0.0, 0.0], [1.0, 0.0, 2.0], [0.1, 0.3, 0.2]) == 1


def test_single_point_proposal_has_positive_ei():
    model = gp.fit([[0.5]], [1.0], 1e-6, gp.Kernel("matern52", 1.0, (0.2,)))
    u, ei = propose_next(model, 1.0, np.random.default_rng(0), 256, 0)
    assert ei > 0 and 0 <= u[0] <= 1


def test_candidates_in_unit_cube_and_deterministic():
    a = candidate_set(3, np.random.default_rng(1), 128, 30, incumbent=np.array([0.99, 0.0, 0.5]))
    b = candidate_set(3, np.random.default_rng(1), 128, 30, incumbent=np.array([0.99, 0.0, 0.5]))
    assert a.shape == (158, 3) and np.all((a >= 0) & (a <= 1)) and np.array_equal(a, b)


# search space


def test_space_round_trip_and_shrink():
    s = SearchSpace.position()
    u = np.array([0.1, 0.5, 0.9])
    assert np.allclose(s.to_unit(s.to_values(u)), u)
    inner = s.shrink(s.to_values(u), 0.25)
    assert np.all(inner.lower >= s.lower - 1e-12) and np.all(inner.upper <= s.upper + 1e-12)


@given(st.lists(st.floats(0, 1), min_size=3, max_size=3), st.floats(0.05, 1.0))
def test_shrunk_box_is_subset(u, factor):
    s = SearchSpace.position()
    inner = s.shrink(s.to_values(np.array(u)), factor)
    assert np.all(inner.lower >= s.lower - 1e-9) and np.all(inner.upper <= s.upper + 1e-9)
    assert np.all(inner.lower < inner.upper)


def test_full_space_contains_baseline():
    s = SearchSpace.full()
    assert s.dim == 12 and s.contains(s.base_values())


def test_config_validation():
    with pytest.raises(ValueError):
        HboConfig(n_init=1)
    with pytest.raises(ValueError):
        HboConfig(noise_family="quadratic")


# runs


@pytest.mark.parametrize("kind", ["hbo", "bo", "rs"])
def test_runs_are_deterministic(kind):
    def go():
        if kind == "rs":
            return rs_run(noisy, LINE, 13, np.random.default_rng(5))
        return (hbo_run if kind == "hbo" else bo_run)(noisy, LINE, FAST, np.random.default_rng(5))

    assert traces_equal(go(), go())


def test_two_stage_is_deterministic_and_sized():
    def go():
        return two_stage_run(noisy, noisy, LINE, FAST, np.random.default_rng(2))

    (a, ta), (b, tb) = go(), go()
    assert np.array_equal(a, b) and traces_equal(ta, tb)
    assert len(ta.trials) == FAST.n_init + FAST.n_iter
    assert ta.stage_bounds and {t.stage for t in ta.trials} == {1, 2}


@pytest.mark.parametrize("runner", [hbo_run, bo_run])
def test_trace_length_and_monotone_best(runner):
    tr = runner(noisy, LINE, FAST, np.random.default_rng(0))
    assert len(tr.trials) == FAST.n_init + FAST.n_iter
    assert check_monotone(tr) and np.all(np.diff(tr.best_so_far) <= 0)


def test_no_iterations_is_pure_initial_design():
    tr = hbo_run(quadratic, LINE, replace(FAST, n_iter=0), np.random.default_rng(0))
    assert len(tr.trials) == 5 and not tr.snapshots
    assert tr.best.error == min(t.error for t in tr.trials)


def test_bo_equals_hbo_with_constant_noise():
    a = bo_run(noisy, LINE, FAST, np.random.default_rng(8))
    b = hbo_run(noisy, LINE, replace(FAST, noise_family="constant"), np.random.default_rng(8))
    assert traces_equal(a, b)


def test_noise_diagonal_follows_fresh_noise_model():
    tr = hbo_run(noisy, LINE, FAST, np.random.default_rng(3))
    assert tr.snapshots
    for snap in tr.snapshots:
        y = np.array([t.error for t in tr.trials[: snap.iteration]])
        floor = 1e-8 * max(float(np.var(y)), 1e-12)
        expected = np.maximum(predict_sigma(snap.noise_model, snap.X) ** 2, floor)
        assert np.allclose(snap.noise_var, expected, rtol=1e-12, atol=0)


def test_rs_budget_one():
    tr = rs_run(quadratic, LINE, 1, np.random.default_rng(0))
    assert len(tr.trials) == 1 and tr.best is tr.trials[0]
    with pytest.raises(ValueError):
        rs_run(quadratic, LINE, 0, np.random.default_rng(0))


def test_rs_stays_in_bounds():
    s = SearchSpace.position()
    tr = rs_run(lambda x, r: float(np.sum(x)), s, 20, np.random.default_rng(0))
    assert all(s.contains(t.values) for t in tr.trials)


def test_degenerate_stage_split_returns_stage_one():
    cfg = replace(FAST, stage_split=1.0)
    best, tr = two_stage_run(noisy, quadratic, LINE, cfg, np.random.default_rng(4))
    ref = hbo_run(noisy, LINE, cfg, np.random.default_rng(4))
    assert np.array_equal(best, ref.best_values) and traces_equal(tr, ref)


def test_stage_two_stays_inside_shrunk_box():
    best, tr = two_stage_run(noisy, noisy, LINE, FAST, np.random.default_rng(6))
    stage1 = [t for t in tr.trials if t.stage == 1]
    centre = min(stage1, key=lambda t: (t.error, t.index)).values
    inner = LINE.shrink(centre, FAST.shrink)
    assert all(inner.contains(t.values) for t in tr.trials if t.stage == 2)
    assert inner.contains(best)


def test_resume_matches_uninterrupted_run(tmp_path):
    full = hbo_run(noisy, LINE, FAST, np.random.default_rng(9))
    full.write(tmp_path / "t.jsonl")
    history = load_trials(tmp_path / "t.jsonl")[:8]
    resumed = hbo_run(noisy, LINE, FAST, np.random.default_rng(9), history=history)
    assert traces_equal(full, resumed)


def test_failures_are_penalised():
    def flaky(x, rng):
        if x[0] > 0.5:
            raise ObjectiveFailure("diverged")
        return Evaluation(1.0 + x[0], {"note": 1})

    tr = hbo_run(flaky, LINE, FAST, np.random.default_rng(1))
    assert len(tr.trials) == FAST.n_init + FAST.n_iter
    for t in tr.trials:
        if t.failed:
            prior = [p.error for p in tr.trials[: t.index] if not p.failed]
            assert t.error == pytest.approx(10 * (max(prior) if prior else 1.0))
    assert not tr.best.failed


def test_trace_jsonl_round_trip(tmp_path):
    tr = hbo_run(noisy, LINE, FAST, np.random.default_rng(0))
    tr.write(tmp_path / "t.jsonl", tmp_path / "t.json")
    assert [t.to_dict() for t in load_trials(tmp_path / "t.jsonl")] == [t.to_dict() for t in tr.trials]
    summary = json.loads((tmp_path / "t.json").read_text())
    assert summary["method"] == "hbo"


def test_log_transform_needs_positive_errors():
    with pytest.raises(ValueError):
        hbo_run(lambda x, r: 0.0, LINE, replace(FAST, output_transform="log"), np.random.default_rng(0))


@pytest.mark.slow
@pytest.mark.parametrize("runner", [hbo_run, bo_run])
def test_noiseless_quadratic_converges(runner):
    cfg = HboConfig(n_init=5, n_iter=20, output_transform="none")
    hits = sum(abs(runner(quadratic, LINE, cfg, np.random.default_rng(s)).best_values[0] - 0.3) < 0.02 for s in range(50))
    assert hits >= 45


@pytest.mark.slow
def test_random_search_is_worse_on_quadratic():
    cfg = HboConfig(n_init=5, n_iter=20, output_transform="none")
    rs = [abs(rs_run(quadratic, LINE, 25, np.random.default_rng(s)).best_values[0] - 0.3) for s in range(50)]
    hbo = [abs(hbo_run(quadratic, LINE, cfg, np.random.default_rng(s)).best_values[0] - 0.3) for s in range(50)]
    assert np.median(rs) > np.median(hbo)
