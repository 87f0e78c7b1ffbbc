"""Run configuration, rollout objective, benchmark and ablation runners.

Configuration files are flat YAML mappings; every key is optional and
defaults to the values below. Unknown keys are rejected.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import yaml

from . import optimizer as opt
from .control import PARAMETER_PRESETS, ControllerConfig, ParameterSet
from .dynamics import DisturbanceModel, QuadrotorParams, preset
from .rollout import RolloutResult, rollout
from .trajectory import KINDS, TrajectorySpec

METHODS = ("pid-baseline", "rs-pid", "bo-pid", "hbo-pid")
TUNE_METHODS = ("rs", "bo", "hbo", "two-stage")
ABLATIONS = ("noise-model", "stages")
SERIES_HEADER = ["t", "x", "y", "z", "yaw", "x_d", "y_d", "z_d", "yaw_d", "ep_inst", "epsi_inst"]
BENCH_HEADER = ["method", "trajectory", "seed", "e_p_m", "e_psi_deg"]
ABLATE_HEADER = ["ablation", "arm", "trajectory", "seed", "e_p_m", "e_psi_deg"]


class ConfigError(ValueError):
    """Invalid or unknown configuration entry."""


# flat key -> (section, attribute); sections are assembled into RunConfig
_SECTIONS = {
    "trajectory": TrajectorySpec,
    "controller": ControllerConfig,
    "disturbance": DisturbanceModel,
    "optimizer": opt.HboConfig,
}
_TRAJECTORY_KEYS = {f.name: f.name for f in fields(TrajectorySpec) if f.name != "kind"}
_CONTROLLER_KEYS = {f.name: f.name for f in fields(ControllerConfig)}
_DISTURBANCE_KEYS = {f.name: f.name for f in fields(DisturbanceModel)}
_OPTIMIZER_KEYS = {f.name: f.name for f in fields(opt.HboConfig)}


@dataclass(frozen=True)
class RunConfig:
    quadrotor: str = "crazyflie-27g"
    parameters: str = "baseline-pid"
    trajectory: TrajectorySpec = field(default_factory=TrajectorySpec)
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    disturbance: DisturbanceModel = field(default_factory=DisturbanceModel)
    optimizer: opt.HboConfig = field(default_factory=opt.HboConfig)
    dt: float = 0.01
    alpha: float = 0.1
    repeats: int = 1
    full: bool = False
    seeds: tuple[int, ...] = tuple(range(10))
    eval_seeds: int = 5  # held-out rollouts per tuned controller
    selection: str = "recommended"  # "recommended" (noise-aware) or "best" observed
    workers: int = 1
    out: str = "out"

    def __post_init__(self):
        preset(self.quadrotor)
        if self.parameters not in PARAMETER_PRESETS:
            raise ConfigError(f"unknown parameter preset {self.parameters!r}; known: {sorted(PARAMETER_PRESETS)}")
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise ConfigError("dt must be positive")
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        if self.repeats < 1 or self.eval_seeds < 1 or self.workers < 1:
            raise ConfigError("repeats, eval_seeds and workers must be >= 1")
        if not self.seeds:
            raise ConfigError("need at least one seed")
        if self.selection not in ("recommended", "best"):
            raise ConfigError(f"unknown selection rule {self.selection!r}")
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))

    @property
    def quad(self) -> QuadrotorParams:
        return preset(self.quadrotor)

    @property
    def base(self) -> ParameterSet:
        return PARAMETER_PRESETS[self.parameters]

    @property
    def space(self) -> opt.SearchSpace:
        return opt.SearchSpace.full(self.base) if self.full else opt.SearchSpace.position(self.base)

    def with_trajectory(self, kind: str) -> RunConfig:
        return replace(self, trajectory=replace(self.trajectory, kind=kind))

    def to_flat(self) -> dict:
        flat = {
            "quadrotor": self.quadrotor,
            "parameters": self.parameters,
            "trajectory": self.trajectory.kind,
        }
        for section in ("trajectory", "controller", "disturbance", "optimizer"):
            for key, value in asdict(getattr(self, section)).items():
                if section == "trajectory" and key == "kind":
                    continue
                flat[key] = list(value) if isinstance(value, tuple) else value
        for key in ("dt", "alpha", "repeats", "full", "eval_seeds", "selection", "workers", "out"):
            flat[key] = getattr(self, key)
        flat["seeds"] = list(self.seeds)
        return flat


_TOP_KEYS = {"quadrotor", "parameters", "trajectory", "dt", "alpha", "repeats", "full", "seeds", "eval_seeds",
             "selection", "workers", "out"}


def config_from_dict(data: dict | None) -> RunConfig:
    data = dict(data or {})
    groups = {name: {} for name in _SECTIONS}
    top = {}
    for key, value in data.items():
        if key in _TOP_KEYS:
            top[key] = value
        elif key in _TRAJECTORY_KEYS:
            groups["trajectory"][key] = value
        elif key in _CONTROLLER_KEYS:
            groups["controller"][key] = tuple(value) if key == "windup" else value
        elif key in _DISTURBANCE_KEYS:
            groups["disturbance"][key] = value
        elif key in _OPTIMIZER_KEYS:
            groups["optimizer"][key] = value
        else:
            raise ConfigError(f"unknown config key {key!r}")
    kind = top.pop("trajectory", "ellipse")
    if kind not in KINDS:
        raise ConfigError(f"unknown trajectory {kind!r}; known: {KINDS}")
    if "seeds" in top and isinstance(top["seeds"], int):
        top["seeds"] = tuple(range(top["seeds"]))
    try:
        sections = {name: cls(**groups[name]) for name, cls in _SECTIONS.items() if name != "trajectory"}
        traj = TrajectorySpec(kind=kind, **groups["trajectory"])
        return RunConfig(trajectory=traj, **sections, **top)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> RunConfig:
    with open(path) as fh:
        data = yaml.safe_load(fh)
    if data is not None and not isinstance(data, dict):
        raise ConfigError("config file must hold a mapping")
    return config_from_dict(data)


def dump_config(run: RunConfig) -> str:
    return yaml.safe_dump(run.to_flat(), sort_keys=False)


# ---------------------------------------------------------------------------
# rollouts and objectives


def run_rollout(params: ParameterSet, run: RunConfig, seed: int = 0, alpha=None, duration=None) -> RolloutResult:
    return rollout(
        params,
        run.trajectory,
        run.quad,
        run.controller,
        run.disturbance,
        seed=seed,
        dt=run.dt,
        alpha=run.alpha if alpha is None else alpha,
        duration=duration,
    )


def tuning_seed(rng: np.random.Generator) -> int:
    """Disturbance seeds used while tuning are even."""
    return 2 * int(rng.integers(2**61))


def held_out_seeds(seed: int, count: int) -> list[int]:
    """Disturbance seeds for evaluation are odd, hence never seen while tuning."""
    return [2 * (1000 * seed + j) + 1 for j in range(count)]


def objective_from_config(run: RunConfig, alpha=None, duration=None, repeats=None):
    """Objective for the optimisers: free values -> combined tracking error.

    Each call draws ``repeats`` disturbance seeds from the trial's random
    stream and averages the combined error. Diverged rollouts raise
    :class:`~hbopid.optimizer.ObjectiveFailure`.
    """
    space = run.space
    alpha = run.alpha if alpha is None else alpha
    repeats = run.repeats if repeats is None else repeats

    def objective(values, rng):
        params = space.embed(values)
        errs, eps, epsi, seeds = [], [], [], []
        for _ in range(repeats):
            seed = tuning_seed(rng)
            res = run_rollout(params, run, seed, alpha, duration)
            if res.diverged or res.report is None:
                raise opt.ObjectiveFailure(f"rollout diverged after {res.steps} steps (seed {seed})")
            errs.append(res.report.combined)
            eps.append(res.report.position_error)
            epsi.append(res.report.yaw_error)
            seeds.append(seed)
        info = {"e_p": float(np.mean(eps)), "e_psi": float(np.mean(epsi)), "seeds": seeds}
        return opt.Evaluation(float(np.mean(errs)), info)

    return objective


def tune(run: RunConfig, method: str, seed: int, history=None) -> opt.OptimizationTrace:
    """Tune with one method; ``history`` resumes from previously recorded trials."""
    space, cfg = run.space, run.optimizer
    rng = np.random.default_rng(seed)
    if method == "rs":
        return opt.rs_run(objective_from_config(run), space, cfg.n_init + cfg.n_iter, rng, cfg, history)
    if method == "bo":
        return opt.bo_run(objective_from_config(run), space, cfg, rng, history)
    if method == "hbo":
        return opt.hbo_run(objective_from_config(run), space, cfg, rng, history)
    if method == "two-stage":
        if history:
            raise ValueError("two-stage runs cannot be resumed")
        first = objective_from_config(run, alpha=cfg.alpha1, duration=run.trajectory.duration / 2)
        second = objective_from_config(run, alpha=cfg.alpha2)
        return opt.two_stage_run(first, second, space, cfg, rng)[1]
    raise ValueError(f"unknown tuning method {method!r}; known: {TUNE_METHODS}")


def chosen(trace: opt.OptimizationTrace, run: RunConfig) -> opt.TrialRecord:
    """Trial whose gains are deployed: noise-aware recommendation or best observation.

    For a two-stage trace only stage-2 trials qualify, since stage 1 scores a
    different objective.
    """
    if run.selection == "recommended":
        return trace.recommended
    trials = trace.trials[trace.stage_bounds[-1]:] if trace.stage_bounds else trace.trials
    return min(trials, key=lambda t: (t.error, t.index))


def evaluate(params: ParameterSet, run: RunConfig, seeds) -> dict:
    """Held-out metrics averaged over disturbance seeds (over-time std is per run)."""
    ep, epsi, ep_time_std, diverged = [], [], [], 0
    for s in seeds:
        res = run_rollout(params, run, s)
        if res.diverged or res.report is None:
            diverged += 1
            continue
        ep.append(res.report.position_error)
        epsi.append(math.degrees(res.report.yaw_error))
        ep_time_std.append(float(np.std(res.report.position_series)))
    if not ep:
        return {"e_p_m": float("nan"), "e_psi_deg": float("nan"), "e_p_time_std": float("nan"), "diverged": diverged}
    return {
        "e_p_m": float(np.mean(ep)),
        "e_psi_deg": float(np.mean(epsi)),
        "e_p_time_std": float(np.mean(ep_time_std)),
        "diverged": diverged,
    }


# ---------------------------------------------------------------------------
# benchmark


def _median(values) -> float:
    """Median with failed (non-finite) runs ranked worst."""
    v = np.asarray(values, dtype=np.float64)
    return float(np.median(np.where(np.isfinite(v), v, np.inf)))


_METHOD_TUNER = {"rs-pid": "rs", "bo-pid": "bo", "hbo-pid": "hbo"}


def _cell(args):
    method, run, seed = args
    if method == "pid-baseline":
        params, trace = run.base, None
    else:
        trace = tune(run, _METHOD_TUNER[method], seed)
        params = run.space.embed(chosen(trace, run).values)
    metrics = evaluate(params, run, held_out_seeds(seed, run.eval_seeds))
    return {"method": method, "trajectory": run.trajectory.kind, "seed": seed, **metrics}, trace


@dataclass
class BenchmarkReport:
    rows: list[dict]
    traces: dict = field(default_factory=dict)  # (method, trajectory, seed) -> OptimizationTrace
    budget: int = 0
    tuning_seed_parity: str = "even"
    eval_seeds: dict = field(default_factory=dict)

    def cells(self) -> dict:
        """Per (method, trajectory): mean and over-seed std of e_p and e_psi."""
        out = {}
        for key in sorted({(r["method"], r["trajectory"]) for r in self.rows}):
            sel = [r for r in self.rows if (r["method"], r["trajectory"]) == key]
            ep = np.array([r["e_p_m"] for r in sel])
            epsi = np.array([r["e_psi_deg"] for r in sel])
            out[key] = {
                "n": len(sel),
                "failed": int(np.sum(~np.isfinite(ep))),
                "e_p_mean": float(np.nanmean(ep)) if np.any(np.isfinite(ep)) else float("nan"),
                "e_p_seed_std": float(np.nanstd(ep)) if np.any(np.isfinite(ep)) else float("nan"),
                "e_p_median": _median(ep),
                "e_p_time_std": float(np.nanmean([r["e_p_time_std"] for r in sel])),
                "e_psi_mean": float(np.nanmean(epsi)) if np.any(np.isfinite(epsi)) else float("nan"),
                "e_psi_seed_std": float(np.nanstd(epsi)) if np.any(np.isfinite(epsi)) else float("nan"),
                "e_psi_median": _median(epsi),
            }
        return out

    def medians(self, trajectory: str, metric: str = "e_p_m") -> dict:
        out = {}
        for r in self.rows:
            if r["trajectory"] == trajectory:
                out.setdefault(r["method"], []).append(r[metric])
        return {m: _median(v) for m, v in out.items()}

    def ordering(self) -> dict:
        """Methods sorted by median held-out e_p, per trajectory."""
        trajs = sorted({r["trajectory"] for r in self.rows})
        return {t: sorted(self.medians(t), key=lambda m: (self.medians(t)[m], m)) for t in trajs}

    def to_csv(self) -> str:
        return rows_to_csv(self.rows, BENCH_HEADER)

    def summary(self) -> dict:
        return {
            "budget": self.budget,
            "tuning_seed_parity": self.tuning_seed_parity,
            "eval_seeds": self.eval_seeds,
            "cells": [{"method": m, "trajectory": t, **v} for (m, t), v in self.cells().items()],
            "ordering": self.ordering(),
            "std_labels": {
                "e_p_seed_std": "std over seeds of per-run mean error",
                "e_p_time_std": "std over time within a run, averaged over runs",
            },
        }


def _fmt(value) -> str:
    if isinstance(value, float):
        return "nan" if not math.isfinite(value) else repr(round(value, 12))
    return str(value)


def rows_to_csv(rows, header) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for r in rows:
        writer.writerow([_fmt(r[h]) for h in header])
    return buf.getvalue()


def _map(fn, jobs, workers):
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))  # results keep job order


def benchmark(methods, trajectories, seeds, run: RunConfig) -> BenchmarkReport:
    """Tune each method on each trajectory for each seed, evaluate on held-out seeds."""
    methods, trajectories, seeds = list(methods), list(trajectories), list(seeds)
    if not (methods and trajectories and seeds):
        raise ValueError("benchmark needs at least one method, trajectory and seed")
    for m in methods:
        if m not in METHODS:
            raise ValueError(f"unknown method {m!r}; known: {METHODS}")
    jobs = [(m, run.with_trajectory(t), s) for t in trajectories for m in methods for s in seeds]
    results = _map(_cell, jobs, run.workers)
    report = BenchmarkReport(
        rows=[r for r, _ in results],
        traces={(r["method"], r["trajectory"], r["seed"]): tr for r, tr in results if tr is not None},
        budget=run.optimizer.n_init + run.optimizer.n_iter,
        eval_seeds={str(s): held_out_seeds(s, run.eval_seeds) for s in seeds},
    )
    return report


# ---------------------------------------------------------------------------
# ablations


def _ablate_cell(args):
    kind, arm, run, seed = args
    if kind == "noise-model":
        run = replace(run, optimizer=replace(run.optimizer, noise_family=arm))
        trace = tune(run, "hbo", seed)
    else:
        trace = tune(run, "two-stage" if arm == "two-stage" else "hbo", seed)
    params = run.space.embed(chosen(trace, run).values)
    metrics = evaluate(params, run, held_out_seeds(seed, run.eval_seeds))
    row = {"ablation": kind, "arm": arm, "trajectory": run.trajectory.kind, "seed": seed, **metrics}
    return row, trace


@dataclass
class AblationReport:
    kind: str
    rows: list[dict]
    traces: dict = field(default_factory=dict)

    def medians(self, trajectory: str, metric: str) -> dict:
        out = {}
        for r in self.rows:
            if r["trajectory"] == trajectory:
                out.setdefault(r["arm"], []).append(r[metric])
        return {a: _median(v) for a, v in out.items()}

    def to_csv(self) -> str:
        return rows_to_csv(self.rows, ABLATE_HEADER)

    def summary(self) -> dict:
        trajs = sorted({r["trajectory"] for r in self.rows})
        return {
            "ablation": self.kind,
            "median_e_p_m": {t: self.medians(t, "e_p_m") for t in trajs},
            "median_e_psi_deg": {t: self.medians(t, "e_psi_deg") for t in trajs},
            "evaluations_per_arm": {
                a: sorted({len(tr.trials) for (arm, _, _), tr in self.traces.items() if arm == a})
                for a in sorted({k[0] for k in self.traces})
            },
        }


ABLATION_ARMS = {"noise-model": ("exponential", "polynomial"), "stages": ("single-stage", "two-stage")}


def ablate(kind: str, trajectories, seeds, run: RunConfig) -> AblationReport:
    """Paired, matched-budget comparison of two arms of HBO."""
    if kind not in ABLATIONS:
        raise ValueError(f"unknown ablation {kind!r}; known: {ABLATIONS}")
    jobs = [
        (kind, arm, run.with_trajectory(t), s) for t in trajectories for arm in ABLATION_ARMS[kind] for s in seeds
    ]
    results = _map(_ablate_cell, jobs, run.workers)
    traces = {(r["arm"], r["trajectory"], r["seed"]): tr for r, tr in results}
    return AblationReport(kind, [r for r, _ in results], traces)


# ---------------------------------------------------------------------------
# persistence and plot data


def write_text(path, text: str) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(text)


def write_json(path, data) -> None:
    write_text(path, json.dumps(data, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def series_csv(result: RolloutResult) -> str:
    rows = [dict(zip(SERIES_HEADER, map(float, row))) for row in result.series_table()]
    return rows_to_csv(rows, SERIES_HEADER)


def write_trace(trace: opt.OptimizationTrace, directory, stem: str) -> tuple[Path, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    jsonl, summary = directory / f"{stem}.jsonl", directory / f"{stem}_summary.json"
    trace.write(jsonl, summary)
    return jsonl, summary


def lint_trace(path) -> bool:
    """Best-so-far of a trace file never increases."""
    return opt.check_monotone([t.error for t in opt.load_trials(path)])


def tidy(path) -> str:
    """Long-format CSV (id columns, ``variable``, ``value``) from a series, benchmark or trace file."""
    path = Path(path)
    if path.suffix == ".jsonl":
        trials = opt.load_trials(path)
        best = np.minimum.accumulate([t.error for t in trials]) if trials else []
        rows = []
        for t, b in zip(trials, best):
            rows.append({"index": t.index, "stage": t.stage, "variable": "error", "value": float(t.error)})
            rows.append({"index": t.index, "stage": t.stage, "variable": "best_so_far", "value": float(b)})
        return rows_to_csv(rows, ["index", "stage", "variable", "value"])
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        records = list(reader)
    if header == SERIES_HEADER:
        ids = ["t"]
    elif header == BENCH_HEADER:
        ids = ["method", "trajectory", "seed"]
    elif header == ABLATE_HEADER:
        ids = ["ablation", "arm", "trajectory", "seed"]
    else:
        raise ValueError(f"unrecognised CSV header in {path}: {header}")
    rows = []
    for rec in records:
        for col in header:
            if col not in ids:
                rows.append({**{k: rec[k] for k in ids}, "variable": col, "value": rec[col]})
    return rows_to_csv(rows, ids + ["variable", "value"])


def cpu_workers() -> int:
    return max(1, (os.cpu_count() or 1) - 1)
