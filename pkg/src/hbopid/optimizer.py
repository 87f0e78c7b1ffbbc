"""Heteroscedastic Bayesian optimisation of PID gains, plus baselines.

All optimisers work in a unit cube; :class:`SearchSpace` maps unit
coordinates to gain values (log-warped for proportional and derivative
gains) and embeds them into a full :class:`~hbopid.control.ParameterSet`.
"""

from __future__ import annotations

import json
import logging
import math
import time
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy.stats import norm, qmc

from . import gp
from .control import BASELINE_PID, GAINS, LOOPS, ParameterSet
from .dynamics import SimulationDiverged
from .noisemodel import NoiseModel, fit_noise, predict_sigma

log = logging.getLogger(__name__)

DEFAULT_BOUNDS = {"kp": (0.1, 20.0), "ki": (0.0, 5.0), "kd": (0.0, 10.0)}
LOG_WARPED = ("kp", "kd")
# attitude loops map angle error to angular acceleration and need gains an
# order of magnitude above the position loops (baseline roll/pitch kp = 80)
LOOP_BOUND_SCALE = {"pos_xy": 1.0, "pos_z": 1.0, "att_rp": 10.0, "att_yaw": 10.0}
# exp(-E[log|Z|]) for Z ~ N(0, 1): turns a log-domain fit of |residual|
# into an unbiased log-domain fit of the noise std
HALF_NORMAL_LOG_BIAS = math.exp((np.euler_gamma + math.log(2.0)) / 2.0)


class ObjectiveFailure(RuntimeError):
    """The objective could not produce a finite error (e.g. a diverged rollout)."""


# ---------------------------------------------------------------------------
# search space


@dataclass(frozen=True)
class FreeParameter:
    """One searched gain, possibly shared by several loops."""

    loops: tuple[str, ...]
    gain: str
    lower: float
    upper: float
    log: bool = False

    def __post_init__(self):
        if isinstance(self.loops, str):
            object.__setattr__(self, "loops", (self.loops,))
        if self.gain not in GAINS or any(loop not in LOOPS for loop in self.loops):
            raise ValueError(f"bad free parameter {self.loops}/{self.gain}")
        if not (self.lower < self.upper and self.lower >= 0):
            raise ValueError(f"need 0 <= lower < upper, got [{self.lower}, {self.upper}] for {self.name}")

    @property
    def name(self) -> str:
        return "+".join(self.loops) + "." + self.gain

    @property
    def _offset(self) -> float:
        return self.lower if self.lower > 0 else 0.01 * (self.upper - self.lower)

    def to_value(self, u):
        u = np.clip(np.asarray(u, dtype=np.float64), 0.0, 1.0)
        if not self.log:
            return self.lower + u * (self.upper - self.lower)
        c = self._offset
        ratio = 1.0 + (self.upper - self.lower) / c
        return self.lower + c * (ratio**u - 1.0)

    def to_unit(self, value):
        value = np.asarray(value, dtype=np.float64)
        if not self.log:
            return (value - self.lower) / (self.upper - self.lower)
        c = self._offset
        ratio = 1.0 + (self.upper - self.lower) / c
        return np.log1p((value - self.lower) / c) / math.log(ratio)


@dataclass(frozen=True)
class SearchSpace:
    params: tuple[FreeParameter, ...]
    base: ParameterSet = BASELINE_PID

    def __post_init__(self):
        if len(self.params) < 1:
            raise ValueError("search space needs at least one free parameter")
        object.__setattr__(self, "params", tuple(self.params))

    @property
    def dim(self) -> int:
        return len(self.params)

    @property
    def names(self) -> list[str]:
        return [p.name for p in self.params]

    @property
    def lower(self) -> np.ndarray:
        return np.array([p.lower for p in self.params])

    @property
    def upper(self) -> np.ndarray:
        return np.array([p.upper for p in self.params])

    @classmethod
    def position(cls, base: ParameterSet = BASELINE_PID, bounds=None) -> SearchSpace:
        """Outer-loop PID triple shared by the xy and z position loops (d = 3)."""
        bounds = {**DEFAULT_BOUNDS, **(bounds or {})}
        return cls(
            tuple(FreeParameter(("pos_xy", "pos_z"), g, *bounds[g], log=g in LOG_WARPED) for g in GAINS),
            base,
        )

    @classmethod
    def full(cls, base: ParameterSet = BASELINE_PID, bounds=None) -> SearchSpace:
        """Every gain of every loop (d = 12); attitude-loop boxes are scaled up."""
        bounds = {**DEFAULT_BOUNDS, **(bounds or {})}
        return cls(
            tuple(
                FreeParameter(
                    (loop,),
                    g,
                    bounds[g][0] * LOOP_BOUND_SCALE[loop],
                    bounds[g][1] * LOOP_BOUND_SCALE[loop],
                    log=g in LOG_WARPED,
                )
                for loop in LOOPS
                for g in GAINS
            ),
            base,
        )

    def to_values(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=np.float64)
        return np.stack([p.to_value(u[..., i]) for i, p in enumerate(self.params)], axis=-1)

    def to_unit(self, values) -> np.ndarray:
        values = np.asarray(values, dtype=np.float64)
        return np.stack([p.to_unit(values[..., i]) for i, p in enumerate(self.params)], axis=-1)

    def contains(self, values, tol: float = 1e-12) -> bool:
        values = np.asarray(values, dtype=np.float64)
        return bool(np.all(values >= self.lower - tol) and np.all(values <= self.upper + tol))

    def embed(self, values) -> ParameterSet:
        arr = self.base.as_array()
        for p, v in zip(self.params, np.asarray(values, dtype=np.float64).reshape(-1)):
            for loop in p.loops:
                arr[LOOPS.index(loop), GAINS.index(p.gain)] = v
        return ParameterSet.from_array(arr)

    def base_values(self) -> np.ndarray:
        """Free-parameter values of the base parameter set, clipped into the box."""
        arr = self.base.as_array()
        vals = [arr[LOOPS.index(p.loops[0]), GAINS.index(p.gain)] for p in self.params]
        return np.clip(vals, self.lower, self.upper)

    def shrink(self, center_values, factor: float) -> SearchSpace:
        """Box of ``factor`` times the unit-width centred on ``center_values``, clipped."""
        if not 0 < factor <= 1:
            raise ValueError("shrink factor must lie in (0, 1]")
        c = np.clip(self.to_unit(center_values), 0.0, 1.0)
        lo = np.clip(c - factor / 2, 0.0, 1.0 - factor)
        hi = lo + factor
        vlo, vhi = self.to_values(lo), self.to_values(hi)
        params = tuple(
            replace(p, lower=float(a), upper=float(max(b, a + 1e-12))) for p, a, b in zip(self.params, vlo, vhi)
        )
        return SearchSpace(params, self.base)

    def to_dict(self) -> dict:
        return {
            "params": [
                {"loops": list(p.loops), "gain": p.gain, "lower": p.lower, "upper": p.upper, "log": p.log}
                for p in self.params
            ],
            "base": self.base.to_dict(),
        }


# ---------------------------------------------------------------------------
# configuration and records


@dataclass(frozen=True)
class HboConfig:
    n_init: int = 10
    n_iter: int = 40
    n_candidates: int = 4096
    n_local: int = 256
    kernel: str = "matern52"
    noise_family: str = "exponential"  # "exponential", "polynomial" or "constant"
    noise_degree: int = 2
    penalty_factor: float = 10.0
    shrink: float = 0.25
    alpha1: float = 0.05
    alpha2: float = 0.2
    stage_split: float = 0.5
    stage1_homoscedastic: bool = False
    residuals: str = "loo"  # "loo" or "fitted"
    incumbent: str = "posterior"  # EI threshold: "observed" min or min "posterior" mean
    recommend_kappa: float = 0.0  # recommendation minimises mean + kappa * latent std
    output_transform: str = "log"  # surrogate models log(error); "none" for signed objectives

    def __post_init__(self):
        if self.n_init < 2 or self.n_iter < 0:
            raise ValueError("need n_init >= 2 and n_iter >= 0")
        if self.noise_family not in ("exponential", "polynomial", "constant"):
            raise ValueError(f"unknown noise family {self.noise_family!r}")
        if self.n_candidates < 1 or self.n_local < 0:
            raise ValueError("candidate counts must be positive")
        if self.output_transform not in ("log", "none"):
            raise ValueError(f"unknown output transform {self.output_transform!r}")
        if self.incumbent not in ("observed", "posterior") or self.residuals not in ("loo", "fitted"):
            raise ValueError("incumbent must be observed/posterior and residuals loo/fitted")
        if not 0 <= self.stage_split <= 1:
            raise ValueError("stage_split must lie in [0, 1]")


@dataclass
class Evaluation:
    error: float
    info: dict = field(default_factory=dict)


@dataclass
class TrialRecord:
    index: int
    stage: int
    values: list
    params: dict
    error: float
    failed: bool = False
    info: dict = field(default_factory=dict)
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "stage": self.stage,
            "values": list(map(float, self.values)),
            "params": self.params,
            "error": float(self.error),
            "failed": self.failed,
            "info": self.info,
            "wall_time": self.wall_time,
        }

    @classmethod
    def from_dict(cls, d: dict) -> TrialRecord:
        return cls(**d)


@dataclass
class ModelSnapshot:
    iteration: int
    kernel: dict
    noise_model: NoiseModel | None
    noise_var: np.ndarray  # GP noise diagonal used for the proposal
    X: np.ndarray  # unit coordinates the GP was trained on

    def summary(self) -> dict:
        return {
            "iteration": self.iteration,
            "kernel": self.kernel,
            "noise_model": None if self.noise_model is None else self.noise_model.to_dict(),
            "noise_var_min": float(np.min(self.noise_var)),
            "noise_var_max": float(np.max(self.noise_var)),
        }


@dataclass
class OptimizationTrace:
    method: str
    space: SearchSpace
    trials: list[TrialRecord] = field(default_factory=list)
    snapshots: list[ModelSnapshot] = field(default_factory=list)
    stage_bounds: list[int] = field(default_factory=list)  # trial index where each later stage starts
    recommended_index: int | None = None

    @property
    def errors(self) -> np.ndarray:
        return np.array([t.error for t in self.trials])

    @property
    def best_so_far(self) -> np.ndarray:
        return np.minimum.accumulate(self.errors) if self.trials else np.array([])

    @property
    def best_index(self) -> int:
        return int(np.argmin(self.errors))

    @property
    def best(self) -> TrialRecord:
        return self.trials[self.best_index]

    @property
    def best_values(self) -> np.ndarray:
        return np.asarray(self.best.values)

    @property
    def recommended(self) -> TrialRecord:
        """Noise-aware pick: observed point with the lowest final posterior mean.

        Falls back to the best observation for runs without a surrogate.
        """
        idx = self.best_index if self.recommended_index is None else self.recommended_index
        return self.trials[idx]

    def summary(self) -> dict:
        return {
            "method": self.method,
            "n_trials": len(self.trials),
            "n_failed": sum(t.failed for t in self.trials),
            "best_index": self.best_index,
            "best_error": float(self.best.error),
            "best_values": list(map(float, self.best.values)),
            "best_params": self.best.params,
            "recommended_index": self.recommended.index,
            "recommended_values": list(map(float, self.recommended.values)),
            "best_so_far": self.best_so_far.tolist(),
            "stage_bounds": self.stage_bounds,
            "space": self.space.to_dict(),
            "models": [s.summary() for s in self.snapshots],
        }

    def write(self, jsonl_path, summary_path=None) -> None:
        with open(jsonl_path, "w") as fh:
            for t in self.trials:
                fh.write(json.dumps(t.to_dict(), sort_keys=True) + "\n")
        if summary_path is not None:
            with open(summary_path, "w") as fh:
                json.dump(self.summary(), fh, indent=2, sort_keys=True)


def load_trials(jsonl_path) -> list[TrialRecord]:
    with open(jsonl_path) as fh:
        return [TrialRecord.from_dict(json.loads(line)) for line in fh if line.strip()]


def check_monotone(trace_or_errors) -> bool:
    """True if the best-so-far series never increases."""
    errs = trace_or_errors.errors if isinstance(trace_or_errors, OptimizationTrace) else np.asarray(trace_or_errors)
    best = np.minimum.accumulate(errs)
    return bool(np.all(np.diff(best) <= 0))


# ---------------------------------------------------------------------------
# acquisition


def expected_improvement(mu, sigma, e_best):
    """Expected reduction below ``e_best`` under a Gaussian N(mu, sigma^2)."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma < 0):
        raise ValueError("sigma must be >= 0")
    gap = e_best - mu
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        z = np.where(sigma > 0, gap / np.where(sigma > 0, sigma, 1.0), 0.0)
        ei = gap * norm.cdf(z) + sigma * norm.pdf(z)
    ei = np.where(sigma > 0, ei, np.maximum(gap, 0.0))
    ei = np.maximum(ei, 0.0)
    return ei if ei.ndim else float(ei)


def candidate_set(dim: int, rng: np.random.Generator, n_candidates: int = 4096, n_local: int = 256, incumbent=None):
    seed = int(rng.integers(2**32))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)  # non power-of-two sample sizes
        cands = qmc.Sobol(dim, scramble=True, seed=seed).random(n_candidates)
    if incumbent is not None and n_local > 0:
        scales = np.array([0.01, 0.05, 0.15])[np.arange(n_local) % 3][:, None]
        local = np.asarray(incumbent)[None, :] + scales * rng.standard_normal((n_local, dim))
        cands = np.vstack([cands, np.clip(local, 0.0, 1.0)])
    return cands


def select_candidate(ei, mu, sigma) -> int:
    """Argmax EI; ties by lower posterior mean, then lower index; all-zero EI -> max sigma."""
    ei = np.asarray(ei)
    if not np.any(ei > 0):
        return int(np.argmax(sigma))
    order = np.lexsort((np.arange(ei.size), mu, -ei))
    return int(order[0])


def propose_next(
    model: gp.GpModel,
    e_best: float,
    rng: np.random.Generator,
    n_candidates: int = 4096,
    n_local: int = 256,
    incumbent=None,
) -> tuple[np.ndarray, float]:
    """Maximise EI over quasi-random candidates in the unit cube plus incumbent perturbations."""
    cands = candidate_set(model.X.shape[1], rng, n_candidates, n_local, incumbent)
    post = gp.predict(model, cands)
    ei = expected_improvement(post.mean, post.std, e_best)
    i = select_candidate(ei, post.mean, post.std)
    return cands[i], float(ei[i])


# ---------------------------------------------------------------------------
# loops

Objective = Callable[[np.ndarray, np.random.Generator], "float | Evaluation"]


def _evaluate(objective, values, rng, worst, penalty_factor):
    start = time.perf_counter()
    info = {}
    try:
        out = objective(values, rng)
        if isinstance(out, Evaluation):
            err, info = float(out.error), dict(out.info)
        else:
            err = float(out)
        failed = not math.isfinite(err)
    except (ObjectiveFailure, SimulationDiverged) as exc:
        failed, err = True, float("nan")
        info = {"failure": str(exc)}
    if failed:
        err = penalty_factor * (worst if worst is not None and worst > 0 else 1.0)
    return err, failed, info, time.perf_counter() - start


class _Run:
    """Shared bookkeeping: dataset, per-trial random streams, penalties."""

    def __init__(self, method, objective, space, cfg, rng, history=None, stage=1):
        self.trace = OptimizationTrace(method, space)
        self.objective = objective
        self.space = space
        self.cfg = cfg
        self.stage = stage
        self.root = int(rng.integers(2**63))
        for t in history or []:
            self.trace.trials.append(t)

    def stream(self, index: int, purpose: int) -> np.random.Generator:
        return np.random.default_rng([self.root, index, purpose])

    @property
    def worst(self):
        ok = [t.error for t in self.trace.trials if not t.failed]
        return max(ok) if ok else None

    def evaluate(self, values) -> TrialRecord:
        idx = len(self.trace.trials)
        err, failed, info, wall = _evaluate(
            self.objective, values, self.stream(idx, 0), self.worst, self.cfg.penalty_factor
        )
        rec = TrialRecord(
            idx, self.stage, list(map(float, values)), self.space.embed(values).to_dict(), err, failed, info, wall
        )
        self.trace.trials.append(rec)
        return rec

    def data(self):
        """Unit-cube inputs and surrogate targets (log errors unless disabled)."""
        X = np.array([self.space.to_unit(t.values) for t in self.trace.trials])
        y = self.trace.errors
        if self.cfg.output_transform == "log":
            if np.any(y <= 0):
                raise ValueError("log output transform needs strictly positive errors")
            y = np.log(y)
        return np.clip(X, 0.0, 1.0), y


def _noise_floor(y):
    return 1e-8 * max(float(np.var(y)), 1e-12)


def _fit_surrogate(X, y, cfg: HboConfig, seed, kernel=None, noise_model=None):
    """One model-update cycle; returns (gp model, noise model or None, kernel).

    Homoscedastic ("constant"): ML kernel plus one learned noise variance.
    Heteroscedastic: residuals of the current GP -> noise model -> new
    noise diagonal -> hyperparameters retrained with that diagonal. The
    current GP is the previous cycle's kernel and noise model conditioned
    on the latest data, or a homoscedastic fit on the first cycle.
    """
    floor = _noise_floor(y)
    if cfg.noise_family == "constant" or kernel is None:
        fitted = gp.optimize_hyperparams(X, y, floor, family=cfg.kernel, learn_noise=True, seed=seed)
        current = gp.fit(X, y, fitted.noise + floor, fitted.kernel)
        if cfg.noise_family == "constant":
            return current, None, fitted.kernel
    else:
        current = gp.fit(X, y, np.maximum(predict_sigma(noise_model, X) ** 2, floor), kernel)

    if cfg.residuals == "loo":
        resid = np.abs(gp.loo_residuals(current))
    else:
        resid = np.abs(y - gp.predict(current, X).mean)
    d = X.shape[1]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        noise_model = fit_noise(X, HALF_NORMAL_LOG_BIAS * resid, cfg.noise_degree, cfg.noise_family, np.zeros(d), np.ones(d))
    diag = np.maximum(predict_sigma(noise_model, X) ** 2, floor)
    kernel = gp.fit_hyperparams(X, y, diag, family=cfg.kernel, seed=seed)
    return gp.fit(X, y, diag, kernel), noise_model, kernel


def _bo(method, objective, space, cfg: HboConfig, rng, history=None, stage=1, initial=None, n_init=None, n_total=None):
    run = _Run(method, objective, space, cfg, rng, history, stage)
    trials = run.trace.trials
    n_init = cfg.n_init if n_init is None else n_init
    n_total = cfg.n_init + cfg.n_iter if n_total is None else n_total

    # initial design: explicit unit-cube points first, then uniform samples
    seeds = [] if initial is None else list(initial)
    while len(trials) < min(n_init, n_total):
        j = len(trials)
        u = seeds[j] if j < len(seeds) else run.stream(j, 2).random(space.dim)
        run.evaluate(space.to_values(u))

    # each surrogate starts from the previous one, so a resumed run replays
    # the chain over the loaded history (no objective calls) before going on
    kernel = noise_model = None
    X_all, y_all = run.data()
    for j in range(n_init, min(len(trials), n_total)):
        X, y = X_all[:j], y_all[:j]
        model, noise_model, kernel = _fit_surrogate(X, y, cfg, seed=j, kernel=kernel, noise_model=noise_model)
        run.trace.snapshots.append(ModelSnapshot(j, kernel.to_dict(), noise_model, model.noise.copy(), X.copy()))

    while len(trials) < n_total:
        j = len(trials)
        X, y = run.data()
        model, noise_model, kernel = _fit_surrogate(X, y, cfg, seed=j, kernel=kernel, noise_model=noise_model)
        run.trace.snapshots.append(ModelSnapshot(j, kernel.to_dict(), noise_model, model.noise.copy(), X.copy()))
        if cfg.incumbent == "posterior":
            mu = gp.predict(model, X).mean
            i_best = int(np.argmin(mu))
            e_best = float(mu[i_best])
        else:
            i_best = int(np.argmin(y))
            e_best = float(y[i_best])
        u, _ = propose_next(model, e_best, run.stream(j, 1), cfg.n_candidates, cfg.n_local, X[i_best])
        run.evaluate(space.to_values(u))

    X, y = run.data()
    if len(y) >= 3:
        try:
            final, _, _ = _fit_surrogate(X, y, cfg, seed=len(y), kernel=kernel, noise_model=noise_model)
            post = gp.predict(final, X)
            run.trace.recommended_index = int(np.argmin(post.mean + cfg.recommend_kappa * post.std))
        except gp.IllConditionedError:
            log.warning("final surrogate fit failed; recommending the best observation")
    return run.trace


def hbo_run(objective: Objective, space: SearchSpace, cfg: HboConfig, rng: np.random.Generator, history=None):
    """Heteroscedastic BO: per-iteration noise-model refit on GP residuals."""
    return _bo("hbo", objective, space, cfg, rng, history)


def bo_run(objective: Objective, space: SearchSpace, cfg: HboConfig, rng: np.random.Generator, history=None):
    """Homoscedastic BO: one ML noise variance shared by every observation."""
    return _bo("bo", objective, space, replace(cfg, noise_family="constant"), rng, history)


def rs_run(objective: Objective, space: SearchSpace, budget: int, rng: np.random.Generator, cfg=None, history=None):
    """Uniform i.i.d. random search over the (warped) box."""
    if budget < 1:
        raise ValueError("budget must be >= 1")
    run = _Run("rs", objective, space, cfg or HboConfig(), rng, history)
    for j in range(len(run.trace.trials), budget):
        run.evaluate(space.to_values(run.stream(j, 2).random(space.dim)))
    return run.trace


def stage_budgets(cfg: HboConfig) -> tuple[int, int]:
    """(stage-1 iterations, stage-2 evaluations); they sum to n_iter."""
    first = int(round(cfg.n_iter * cfg.stage_split))
    return first, cfg.n_iter - first


def two_stage_run(
    objective_stage1: Objective,
    objective_stage2: Objective,
    space: SearchSpace,
    cfg: HboConfig,
    rng: np.random.Generator,
) -> tuple[np.ndarray, OptimizationTrace]:
    """Coarse search on the full box, then a refined search in a shrunk box.

    Stage 2 re-evaluates the best stage-1 trials lying inside the shrunk box
    under its own objective as its initial design, so the total number of
    evaluations stays ``n_init + n_iter``. Returns the stage-2 best values.
    """
    n1, n2 = stage_budgets(cfg)
    runner = bo_run if cfg.stage1_homoscedastic else hbo_run
    first = runner(objective_stage1, space, replace(cfg, n_iter=n1), rng)
    combined = OptimizationTrace("two-stage", space, list(first.trials), list(first.snapshots))
    combined.recommended_index = first.recommended_index
    if n2 == 0:
        return first.best_values, combined

    inner = space.shrink(first.best_values, cfg.shrink)
    ranked = sorted(first.trials, key=lambda t: (t.error, t.index))
    n_seed = min(n2, max(3, n2 // 5))
    seeds = [inner.to_unit(t.values) for t in ranked if not t.failed and inner.contains(t.values)][:n_seed]
    second = _bo("hbo", objective_stage2, inner, cfg, rng, stage=2, initial=seeds, n_init=n_seed, n_total=n2)

    offset = len(combined.trials)
    combined.stage_bounds.append(offset)
    combined.trials.extend(replace(t, index=t.index + offset) for t in second.trials)
    combined.snapshots.extend(second.snapshots)
    rec = second.recommended_index
    combined.recommended_index = None if rec is None else rec + offset
    return second.best_values, combined
