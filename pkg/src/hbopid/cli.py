"""Command-line entry point: ``hbopid <subcommand> [flags]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from . import harness as h
from . import optimizer as opt
from .trajectory import KINDS


def _run_config(args) -> h.RunConfig:
    run = h.load_config(args.config) if args.config else h.RunConfig()
    changes = {}
    if args.seeds is not None:
        changes["seeds"] = tuple(range(args.seed, args.seed + args.seeds))
    if args.out is not None:
        changes["out"] = args.out
    if args.full:
        changes["full"] = True
    if args.repeats is not None:
        changes["repeats"] = args.repeats
    if args.workers is not None:
        changes["workers"] = args.workers
    if args.stage1_homoscedastic:
        changes["optimizer"] = replace(run.optimizer, stage1_homoscedastic=True)
    run = replace(run, **changes)
    if args.trajectory is not None and "," not in args.trajectory:
        run = run.with_trajectory(args.trajectory)
    return run


def _trajectories(args, run) -> list[str]:
    """--trajectory list, else a trajectory named in the config file, else all three."""
    if args.trajectory is None:
        if args.config and "trajectory" in (yaml.safe_load(Path(args.config).read_text()) or {}):
            return [run.trajectory.kind]
        return ["ellipse", "clover", "spiral"]
    names = [t.strip() for t in args.trajectory.split(",") if t.strip()]
    for t in names:
        if t not in KINDS:
            raise SystemExit(f"unknown trajectory {t!r}; known: {', '.join(KINDS)}")
    return names


def cmd_validate(args) -> int:
    run = _run_config(args)
    print(h.dump_config(run), end="")
    return 0


def cmd_simulate(args) -> int:
    run = _run_config(args)
    params = run.base
    if args.params:
        params = h.ParameterSet.from_dict(json.loads(Path(args.params).read_text()))
    res = h.run_rollout(params, run, args.seed)
    out = Path(run.out)
    h.write_text(out / f"rollout_{run.trajectory.kind}_{args.seed}.csv", h.series_csv(res))
    summary = {
        "trajectory": run.trajectory.kind,
        "seed": args.seed,
        "diverged": res.diverged,
        "steps": res.steps,
        "e_p_m": None if res.report is None else res.report.position_error,
        "e_psi_deg": None if res.report is None else res.report.yaw_error_deg,
        "combined": None if res.report is None else res.report.combined,
        "wall_time_s": res.wall_time,
    }
    h.write_json(out / f"rollout_{run.trajectory.kind}_{args.seed}.json", summary)
    print(json.dumps(summary, sort_keys=True))
    return 1 if res.diverged else 0


def cmd_tune(args) -> int:
    run = _run_config(args)
    method = args.method or "hbo"
    method = {"rs-pid": "rs", "bo-pid": "bo", "hbo-pid": "hbo"}.get(method, method)
    out = Path(run.out)
    stem = f"trace_{method}_{run.trajectory.kind}_{args.seed}"
    history = None
    if args.resume and (out / f"{stem}.jsonl").exists():
        history = opt.load_trials(out / f"{stem}.jsonl")
        logging.info("resuming from %d recorded trials", len(history))
    trace = h.tune(run, method, args.seed, history)
    h.write_trace(trace, out, stem)
    pick = h.chosen(trace, run)
    params = run.space.embed(pick.values)
    h.write_json(out / f"{stem}_params.json", params.to_dict())
    held = h.evaluate(params, run, h.held_out_seeds(args.seed, run.eval_seeds))
    result = {"method": method, "trajectory": run.trajectory.kind, "seed": args.seed, "selected_index": pick.index,
              "selected_values": [float(v) for v in pick.values], "held_out": held}
    h.write_json(out / f"{stem}_result.json", result)
    print(json.dumps(result, sort_keys=True))
    return 0


def cmd_benchmark(args) -> int:
    run = _run_config(args)
    methods = args.method.split(",") if args.method else list(h.METHODS)
    report = h.benchmark(methods, _trajectories(args, run), run.seeds, run)
    out = Path(run.out)
    h.write_text(out / "benchmark.csv", report.to_csv())
    h.write_json(out / "benchmark_summary.json", report.summary())
    for (m, t, s), trace in sorted(report.traces.items()):
        h.write_trace(trace, out / "traces", f"{m}_{t}_{s}")
    print(report.to_csv(), end="")
    return 0


def cmd_ablate(args) -> int:
    run = _run_config(args)
    kind = args.kind
    report = h.ablate(kind, _trajectories(args, run), run.seeds, run)
    out = Path(run.out)
    h.write_text(out / f"ablation_{kind}.csv", report.to_csv())
    h.write_json(out / f"ablation_{kind}_summary.json", report.summary())
    for (arm, t, s), trace in sorted(report.traces.items()):
        h.write_trace(trace, out / "traces", f"{kind}_{arm}_{t}_{s}")
    print(report.to_csv(), end="")
    return 0


def cmd_plotdata(args) -> int:
    out = Path(args.out or ".")
    for src in args.inputs:
        path = Path(src)
        h.write_text(out / f"{path.stem}_long.csv", h.tidy(path))
        print(out / f"{path.stem}_long.csv")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat YAML run configuration")
    common.add_argument("--seed", type=int, default=0, help="base random seed")
    common.add_argument("--seeds", type=int, help="number of seeds, counting up from --seed")
    common.add_argument("--method", help="tuning method (rs, bo, hbo, two-stage) or comma list for benchmark")
    common.add_argument("--trajectory", help="trajectory kind, or comma list for benchmark/ablate")
    common.add_argument("--out", help="output directory")
    common.add_argument("--full", action="store_true", help="search all 12 gains instead of the position triple")
    common.add_argument("--stage1-homoscedastic", action="store_true", help="plain BO in the first stage")
    common.add_argument("--repeats", type=int, help="rollouts averaged per objective evaluation")
    common.add_argument("--workers", type=int, help="parallel processes for benchmark cells")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="hbopid", description="Bayesian PID tuning for a simulated quadrotor")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("simulate", parents=[common], help="one rollout with the configured gains")
    p.add_argument("--params", help="JSON parameter set (defaults to the configured preset)")
    p.set_defaults(func=cmd_simulate)
    p = sub.add_parser("tune", parents=[common], help="tune with a single method")
    p.add_argument("--resume", action="store_true", help="continue from an existing trace in --out")
    p.set_defaults(func=cmd_tune)
    p = sub.add_parser("benchmark", parents=[common], help="methods x trajectories x seeds with held-out evaluation")
    p.set_defaults(func=cmd_benchmark)
    p = sub.add_parser("ablate", parents=[common], help="paired ablation of the noise model or the stages")
    p.add_argument("kind", choices=h.ABLATIONS)
    p.set_defaults(func=cmd_ablate)
    p = sub.add_parser("plotdata", parents=[common], help="long-format CSV from series, benchmark or trace files")
    p.add_argument("inputs", nargs="+")
    p.set_defaults(func=cmd_plotdata)
    p = sub.add_parser("validate-config", parents=[common], help="check a config file and print the resolved values")
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    np.seterr(all="ignore")
    try:
        return args.func(args)
    except h.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
