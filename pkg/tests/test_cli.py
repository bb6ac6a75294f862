from __future__ import annotations

import json

import pytest

from sml_sim import cli
from sml_sim.config import ExperimentConfig

TINY = {
    "seed": 3,
    "log_level": "debug",
    "output_dir": "runs/tiny",
    "graph": {"kind": "ring", "agents": 2},
    "data": {"source": "gaussian", "scene": "mean_shift", "shifts": [1.0, 0.5], "train_per_class": 6},
    "model": {"hidden": [2]},
    "training": {"epochs": 2, "batch_size": 4, "learning_rate": 0.05},
    "prediction": {"length": 5},
    "montecarlo": {"replications": 2},
}


def _config(tmp_path, payload=TINY) -> str:
    path = tmp_path / "experiment.json"
    path.write_text(json.dumps(payload))
    return str(path)


def test_output_dir_resolves_next_to_config(tmp_path):
    assert cli.main(["train", "--config", _config(tmp_path)]) == cli.EXIT_OK
    assert (tmp_path / "runs" / "tiny" / "training_summary.json").exists()


def test_out_flag_and_overrides(tmp_path):
    out = tmp_path / "mc"
    code = cli.main([
        "montecarlo", "--config", _config(tmp_path), "--out", str(out),
        "--seed-override", "11", "--replications-override", "1", "--threads", "2",
    ])
    assert code == cli.EXIT_OK
    summary = json.loads((out / "montecarlo_summary.json").read_text())
    assert summary["seed"] == 11
    assert summary["replications"] == 1 and summary["degenerate_stderr"] is True


def test_train_then_predict_then_theory(tmp_path):
    config = _config(tmp_path)
    for command in ("train", "predict", "theory"):
        assert cli.main([command, "--config", config]) == cli.EXIT_OK
    out = tmp_path / "runs" / "tiny"
    artifacts = json.loads((out / "manifest.json").read_text())["artifacts"]
    assert {"training_summary.json", "trajectory.csv", "theory_report.json", "exponent_curve.csv"} <= set(artifacts)


def test_invalid_config_exits_with_one(tmp_path):
    bad = dict(TINY, prediction={"engine": "asl"})
    assert cli.main(["predict", "--config", _config(tmp_path, bad)]) == cli.EXIT_INVALID
    assert cli.main(["predict", "--config", str(tmp_path / "missing.json")]) == cli.EXIT_INVALID
    unknown = dict(TINY, epochs=3)
    assert cli.main(["train", "--config", _config(tmp_path, unknown)]) == cli.EXIT_INVALID


def test_validate_data_on_gaussian_source_exits_with_one(tmp_path):
    assert cli.main(["validate-data", "--config", _config(tmp_path)]) == cli.EXIT_INVALID


def test_runtime_failure_exits_with_two(tmp_path):
    matrix = tmp_path / "matrix.json"
    matrix.write_text(json.dumps({"K": 2, "rows": [[0.5, 0.5], [0.6, 0.5]]}))
    payload = dict(TINY, graph={"kind": "matrix", "matrix_file": "matrix.json"})
    assert cli.main(["predict", "--config", _config(tmp_path, payload)]) == cli.EXIT_FAILED


def test_parser_rejects_unknown_command():
    with pytest.raises(SystemExit):
        cli.build_parser().parse_args(["serve"])


def test_apply_overrides_makes_out_absolute(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    args = cli.build_parser().parse_args(["theory", "--out", "relative", "--threads", "4"])
    config = cli.apply_overrides(ExperimentConfig(), args)
    assert config.output_dir == str(tmp_path / "relative")
    assert config.threads == 4
    assert config.seed == 0
