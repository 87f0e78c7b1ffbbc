import math
from dataclasses import replace

import numpy as np
import pytest
import yaml

from hbopid import harness as h
from hbopid.control import BASELINE_PID, ParameterSet
from hbopid.dynamics import DisturbanceModel

QUIET = DisturbanceModel(0.0, 0.0, 0.0, 0.0)
SMALL = h.config_from_dict(
    {"duration": 6.0, "n_init": 3, "n_iter": 2, "n_candidates": 256, "n_local": 32, "eval_seeds": 2, "seeds": 2}
)


def test_unknown_key_rejected():
    with pytest.raises(h.ConfigError):
        h.config_from_dict({"n_inti": 3})
    with pytest.raises(h.ConfigError):
        h.config_from_dict({"trajectory": "square"})
    with pytest.raises(h.ConfigError):
        h.config_from_dict({"n_init": 1})


def test_flat_keys_route_to_sections():
    run = h.config_from_dict({"trajectory": "clover", "period": 12.0, "n_iter": 7, "force_std": 0.0, "seeds": 3})
    assert run.trajectory.kind == "clover" and run.trajectory.period == 12.0
    assert run.optimizer.n_iter == 7 and run.disturbance.force_std == 0.0
    assert run.seeds == (0, 1, 2)


def test_yaml_round_trip(tmp_path):
    run = h.config_from_dict({"trajectory": "spiral", "alpha": 0.3, "stage_split": 0.25, "full": True})
    path = tmp_path / "c.yaml"
    path.write_text(h.dump_config(run))
    assert h.load_config(path) == run


def test_non_mapping_config_rejected(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump([1, 2]))
    with pytest.raises(h.ConfigError):
        h.load_config(path)


def test_seed_sets_are_disjoint():
    rng = np.random.default_rng(0)
    tuning = {h.tuning_seed(rng) for _ in range(200)}
    held = {s for k in range(20) for s in h.held_out_seeds(k, 5)}
    assert all(s % 2 == 0 for s in tuning) and all(s % 2 == 1 for s in held)
    assert not tuning & held
    assert len(held) == 100


def test_objective_is_deterministic_per_stream():
    obj = h.objective_from_config(SMALL)
    v = SMALL.space.base_values()
    a = obj(v, np.random.default_rng(1))
    b = obj(v, np.random.default_rng(1))
    assert a.error == b.error and a.info == b.info
    assert obj(v, np.random.default_rng(2)).error != a.error


def test_zero_alpha_objective_is_position_error():
    obj = h.objective_from_config(SMALL, alpha=0.0)
    out = obj(SMALL.space.base_values(), np.random.default_rng(0))
    assert out.error == pytest.approx(out.info["e_p"], rel=1e-12)


def test_baseline_hover_without_disturbance():
    run = replace(h.config_from_dict({"trajectory": "hover", "duration": 10.0}), disturbance=QUIET)
    res = h.run_rollout(BASELINE_PID, run, 0)
    assert not res.diverged and res.report.position_error < 0.01


def test_zero_gains_track_badly():
    run = SMALL.with_trajectory("ellipse")
    res = h.run_rollout(ParameterSet.from_array(np.zeros((4, 3))), run, 0)
    assert res.diverged or res.report.position_error > 0.5


@pytest.mark.parametrize("kind", ["ellipse", "clover", "spiral"])
def test_baseline_objective_is_finite(kind):
    run = SMALL.with_trajectory(kind)
    out = h.objective_from_config(run)(run.space.base_values(), np.random.default_rng(0))
    assert math.isfinite(out.error) and out.error > 0


def test_two_stage_tune_uses_matched_budget():
    tr = h.tune(SMALL, "two-stage", 0)
    assert len(tr.trials) == SMALL.optimizer.n_init + SMALL.optimizer.n_iter
    with pytest.raises(ValueError):
        h.tune(SMALL, "annealing", 0)


def test_selection_rule():
    tr = h.tune(SMALL, "hbo", 0)
    assert h.chosen(tr, SMALL) is tr.recommended
    best = h.chosen(tr, replace(SMALL, selection="best"))
    assert best.error == min(t.error for t in tr.trials)


def test_median_ranks_failures_last():
    assert h._median([1.0, float("nan"), float("nan")]) == math.inf
    assert h._median([1.0, 2.0, float("nan")]) == 2.0


def test_benchmark_single_cell_and_budget_fairness():
    rep = h.benchmark(["pid-baseline", "rs-pid", "bo-pid", "hbo-pid"], ["ellipse"], [0], SMALL)
    assert [r["method"] for r in rep.rows] == list(h.METHODS)
    budget = SMALL.optimizer.n_init + SMALL.optimizer.n_iter
    assert all(len(tr.trials) == budget for tr in rep.traces.values()) and rep.budget == budget
    csv_text = rep.to_csv()
    assert csv_text.splitlines()[0] == ",".join(h.BENCH_HEADER) and len(csv_text.splitlines()) == 5
    summary = rep.summary()
    assert summary["tuning_seed_parity"] == "even"
    assert all(s % 2 == 1 for s in summary["eval_seeds"]["0"])
    assert set(rep.ordering()["ellipse"]) == set(h.METHODS)


def test_benchmark_rejects_unknown_method():
    with pytest.raises(ValueError):
        h.benchmark(["lqr"], ["ellipse"], [0], SMALL)


def test_ablation_arms():
    rep = h.ablate("noise-model", ["ellipse"], [0], SMALL)
    assert {r["arm"] for r in rep.rows} == {"exponential", "polynomial"}
    assert rep.to_csv().splitlines()[0] == ",".join(h.ABLATE_HEADER)
    with pytest.raises(ValueError):
        h.ablate("kernel", ["ellipse"], [0], SMALL)


def test_trace_files_and_tidy(tmp_path):
    tr = h.tune(SMALL, "hbo", 1)
    jsonl, summary = h.write_trace(tr, tmp_path, "t")
    assert h.lint_trace(jsonl) and summary.exists()
    long = h.tidy(jsonl).splitlines()
    assert long[0] == "index,stage,variable,value" and len(long) == 1 + 2 * len(tr.trials)


def test_tidy_series_and_rejects_unknown(tmp_path):
    res = h.run_rollout(BASELINE_PID, SMALL, 0)
    p = tmp_path / "s.csv"
    h.write_text(p, h.series_csv(res))
    lines = h.tidy(p).splitlines()
    assert lines[0] == "t,variable,value" and len(lines) == 1 + (len(h.SERIES_HEADER) - 1) * (res.steps + 1)  # includes t = 0
    bad = tmp_path / "b.csv"
    bad.write_text("a,b\n1,2\n")
    with pytest.raises(ValueError):
        h.tidy(bad)
