import json

import pytest
import yaml

from hbopid import harness as h
from hbopid.cli import main

SMALL = {"duration": 4.0, "n_init": 3, "n_iter": 2, "n_candidates": 128, "n_local": 16, "eval_seeds": 1}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump({**SMALL, "out": str(tmp_path / "out")}))
    return path


def test_validate_config_prints_resolved(config, capsys):
    assert main(["validate-config", "--config", str(config)]) == 0
    resolved = yaml.safe_load(capsys.readouterr().out)
    assert resolved["n_init"] == 3 and resolved["trajectory"] == "ellipse"


def test_unknown_key_exits_with_code_2(tmp_path, capsys):
    path = tmp_path / "bad.yaml"
    path.write_text("n_inti: 3\n")
    assert main(["validate-config", "--config", str(path)]) == 2
    assert "n_inti" in capsys.readouterr().err


def test_simulate_writes_series(config, tmp_path):
    assert main(["simulate", "--config", str(config), "--trajectory", "clover", "--seed", "3"]) == 0
    out = tmp_path / "out"
    assert (out / "rollout_clover_3.csv").read_text().startswith(",".join(h.SERIES_HEADER))
    assert json.loads((out / "rollout_clover_3.json").read_text())["diverged"] is False


def test_tune_and_resume(config, tmp_path, capsys):
    assert main(["tune", "--config", str(config), "--method", "bo"]) == 0
    first = json.loads(capsys.readouterr().out)
    out = tmp_path / "out"
    jsonl = out / "trace_bo_ellipse_0.jsonl"
    lines = jsonl.read_text().splitlines()
    jsonl.write_text("\n".join(lines[:4]) + "\n")
    assert main(["tune", "--config", str(config), "--method", "bo", "--resume"]) == 0
    second = json.loads(capsys.readouterr().out)
    assert first["selected_values"] == second["selected_values"]
    assert (out / "trace_bo_ellipse_0_params.json").exists()


def test_benchmark_ablate_and_plotdata(config, tmp_path):
    out = tmp_path / "out"
    args = ["--config", str(config), "--trajectory", "ellipse", "--seeds", "1"]
    assert main(["benchmark", "--method", "pid-baseline,rs-pid", *args]) == 0
    assert (out / "benchmark.csv").read_text().count("\n") == 3
    assert list((out / "traces").glob("rs-pid_ellipse_0.jsonl"))
    assert main(["ablate", "stages", *args]) == 0
    assert (out / "ablation_stages.csv").exists()
    assert main(["plotdata", str(out / "benchmark.csv"), "--out", str(out)]) == 0
    assert (out / "benchmark_long.csv").read_text().startswith("method,trajectory,seed,variable,value")


def test_benchmark_uses_trajectory_from_config(tmp_path):
    path = tmp_path / "clover.yaml"
    path.write_text(yaml.safe_dump({**SMALL, "trajectory": "clover", "out": str(tmp_path / "o")}))
    assert main(["benchmark", "--config", str(path), "--method", "pid-baseline", "--seeds", "1"]) == 0
    rows = (tmp_path / "o" / "benchmark.csv").read_text().splitlines()[1:]
    assert [r.split(",")[1] for r in rows] == ["clover"]
