"""
End-to-end tests of the battery-forecast command line.
"""

import json
import logging
import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from battery_forecast import __version__
from battery_forecast.cli import EXIT_CONFIG, EXIT_INTEGRITY, EXIT_MISSING, EXIT_OK, main
from battery_forecast.exceptions import ConfigError, MissingThresholdSource
from battery_forecast.synthgen import TRUTH_MANIFEST


def _write(path: Path, data) -> str:
    path.write_text(json.dumps(data))
    return str(path)


def _summary(capsys):
    """JSON summary printed on the last stdout line."""
    return json.loads(capsys.readouterr().out.strip().splitlines()[-1])


def _n_batteries(settings) -> int:
    return settings["spec"]["n_conditions"] * settings["spec"]["batteries_per_condition"]


@pytest.fixture(autouse=True)
def _drop_cli_log_handlers():
    """main() binds a stderr handler to whatever stream the current test captured."""
    yield
    root = logging.getLogger()
    for handler in root.handlers[:]:
        if type(handler) is logging.StreamHandler:
            root.removeHandler(handler)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory, tiny_settings):
    """synth -> preprocess -> train once for the whole module."""
    root = tmp_path_factory.mktemp("pipeline")
    spec = _write(root / "spec.json", tiny_settings["spec"])
    config = _write(root / "model.json", {**tiny_settings["model"], "max_epochs": 1})
    store = str(root / "runs.db")
    paths = {
        "config": config,
        "store": store,
        "records": root / "records",
        "samples": root / "samples",
        "run": root / "run",
    }
    assert main(["synth", "--config", spec, "--out", str(paths["records"]), "--store", store]) == EXIT_OK
    assert main(["preprocess", str(paths["records"]), "--config", config,
                 "--out", str(paths["samples"]), "--store", store]) == EXIT_OK
    assert main(["train", str(paths["samples"]), "--config", config, "--max-steps", "1",
                 "--out", str(paths["run"]), "--store", store]) == EXIT_OK
    return paths


class TestSynth:
    def test_writes_records_and_truth(self, tiny_settings, tmp_path, capsys):
        spec = _write(tmp_path / "spec.json", tiny_settings["spec"])
        out = tmp_path / "records"
        assert main(["synth", "--config", spec, "--out", str(out), "--no-store"]) == EXIT_OK
        n = _n_batteries(tiny_settings)
        assert len(list(out.glob("synth-*.json"))) == n
        assert (out / TRUTH_MANIFEST).exists()
        assert _summary(capsys)["batteries"] == n
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["command"] == "synth"
        assert manifest["seed"] == tiny_settings["spec"]["seed"]

    def test_seed_override(self, tiny_settings, tmp_path):
        spec = _write(tmp_path / "spec.json", tiny_settings["spec"])
        assert main(["synth", "--config", spec, "--seed", "11", "--out", str(tmp_path), "--no-store"]) == EXIT_OK
        assert json.loads((tmp_path / TRUTH_MANIFEST).read_text())["spec"]["seed"] == 11


class TestExitCodes:
    """Failures map to distinct exit codes."""

    def test_invalid_spec(self, tmp_path):
        spec = _write(tmp_path / "spec.json", {"life_range": [50, 60]})
        assert main(["synth", "--config", spec, "--out", str(tmp_path / "out"), "--no-store"]) == EXIT_CONFIG

    def test_unknown_config_key(self, tmp_path):
        config = _write(tmp_path / "model.json", {"depth": 3})
        (tmp_path / "records").mkdir()
        assert main(["preprocess", str(tmp_path / "records"), "--config", config,
                     "--out", str(tmp_path / "out"), "--no-store"]) == EXIT_CONFIG

    def test_bad_arguments(self):
        assert main(["train"]) == EXIT_CONFIG

    def test_missing_records(self, tmp_path):
        assert main(["preprocess", str(tmp_path / "absent"), "--out", str(tmp_path / "out"),
                     "--no-store"]) == EXIT_MISSING

    def test_missing_checkpoint(self, tmp_path):
        assert main(["evaluate", str(tmp_path / "absent.pt"), str(tmp_path),
                     "--out", str(tmp_path / "out"), "--no-store"]) == EXIT_MISSING

    def test_runs_needs_store(self):
        assert main(["runs", "--no-store"]) == EXIT_CONFIG

    def test_tampered_plan(self, pipeline, tmp_path):
        plan = json.loads((pipeline["run"] / "split.json").read_text())
        moved = plan["batteries"]["train"].pop()
        plan["batteries"]["test"].append(moved)
        tampered = _write(tmp_path / "split.json", plan)
        code = main(["train", str(pipeline["samples"]), "--config", pipeline["config"], "--plan", tampered,
                     "--max-steps", "1", "--out", str(tmp_path / "run"), "--no-store"])
        assert code == EXIT_INTEGRITY

    def test_percentile_without_training_deltas(self, pipeline, tmp_path, monkeypatch):
        monkeypatch.setattr("battery_forecast.cli.collect_training_deltas", lambda records, params: np.empty(0))
        smoothing = _write(tmp_path / "smoothing.json", {"onset_method": "percentile"})
        out = tmp_path / "out"
        code = main(["preprocess", str(pipeline["records"]), "--config", pipeline["config"],
                     "--smoothing", smoothing, "--out", str(out), "--no-store"])
        assert code == EXIT_CONFIG
        assert not list(out.glob("*.npz"))

    def test_missing_threshold_source_is_config_error(self):
        assert issubclass(MissingThresholdSource, ConfigError)


class TestPipeline:
    def test_preprocess_outputs(self, pipeline, tiny_settings):
        assert len(list(pipeline["samples"].glob("*.npz"))) == _n_batteries(tiny_settings)
        assert json.loads((pipeline["samples"] / "exclusions.json").read_text()) == []

    def test_preprocess_rerun_is_byte_identical(self, pipeline, tmp_path):
        out = tmp_path / "again"
        assert main(["preprocess", str(pipeline["records"]), "--config", pipeline["config"],
                     "--out", str(out), "--no-store"]) == EXIT_OK
        for first in sorted(pipeline["samples"].glob("*.npz")):
            assert (out / first.name).read_bytes() == first.read_bytes()

    def test_train_outputs(self, pipeline):
        run = pipeline["run"]
        for name in ("checkpoint.pt", "split.json", "train_log.jsonl", "manifest.json"):
            assert (run / name).exists(), name
        manifest = json.loads((run / "manifest.json").read_text())
        assert manifest["command"] == "train"
        assert manifest["config_hash"]

    def test_evaluate_with_sweep(self, pipeline, tmp_path, capsys):
        out = tmp_path / "eval"
        code = main(["evaluate", str(pipeline["run"] / "checkpoint.pt"), str(pipeline["samples"]),
                     "--s-cycles", "2", "4", "--out", str(out), "--store", pipeline["store"]])
        assert code == EXIT_OK
        summary = _summary(capsys)
        plan = json.loads((pipeline["run"] / "split.json").read_text())
        assert summary["batteries"] == len(plan["batteries"]["test"])
        for name in ("metrics.csv", "metrics.json", "sweep.csv", "sweep.json"):
            assert (out / name).exists(), name

    def test_inspect(self, pipeline, tmp_path, capsys):
        out = tmp_path / "case"
        code = main(["inspect", str(pipeline["run"] / "checkpoint.pt"), str(pipeline["samples"]),
                     "--battery", "synth-c000-b00", "--out", str(out), "--no-store"])
        assert code == EXIT_OK
        summary = _summary(capsys)
        assert summary["temporal_mass"] + summary["soc_mass"] == pytest.approx(1.0)
        assert (out / "case_study.json").exists()

    def test_inspect_unknown_battery(self, pipeline, tmp_path):
        code = main(["inspect", str(pipeline["run"] / "checkpoint.pt"), str(pipeline["samples"]),
                     "--battery", "nope", "--out", str(tmp_path), "--no-store"])
        assert code == EXIT_MISSING

    def test_embed(self, pipeline, tiny_settings, tmp_path, capsys):
        assert main(["embed", str(pipeline["samples"]), "--config", pipeline["config"],
                     "--out", str(tmp_path), "--no-store"]) == EXIT_OK
        table = json.loads(Path(_summary(capsys)["embedding_file"]).read_text())
        assert table["d_enc"] == tiny_settings["model"]["d_enc"]
        assert len(table["embeddings"]) == tiny_settings["spec"]["n_conditions"]

    def test_ablate_then_runs(self, pipeline, tmp_path, capsys):
        out = tmp_path / "ablate"
        code = main(["ablate", str(pipeline["samples"]), "--config", pipeline["config"], "--variant", "no_llm",
                     "--max-steps", "1", "--out", str(out), "--store", pipeline["store"]])
        assert code == EXIT_OK
        assert "no_llm" in _summary(capsys)
        assert (out / "ablation.csv").exists()
        assert (out / "no_llm" / "report.json").exists()

        assert main(["runs", "--store", pipeline["store"]]) == EXIT_OK
        summary = _summary(capsys)
        assert "no_llm" in {row["variant"] for row in summary["aggregates"]}
        assert summary["stats"]["runs_by_command"]["train"] >= 1


class TestModuleEntryPoint:
    def test_version(self):
        env = {**os.environ, "PYTHONPATH": str(Path(__file__).parent.parent / "src")}
        result = subprocess.run([sys.executable, "-m", "battery_forecast", "--version"],
                                capture_output=True, text=True, env=env, timeout=120)
        assert result.returncode == 0
        assert __version__ in result.stdout
