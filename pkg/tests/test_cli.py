import json
from pathlib import Path

import numpy as np
import pandas as pd
import pytest
from typer.testing import CliRunner

from invariant_policy.cli import app, main
from invariant_policy.core.types import EnvDataset
from invariant_policy.data.io import write_logged_csv
from invariant_policy.simulation.scm import EnvParams, ScmConfig

runner = CliRunner()


@pytest.fixture(autouse=True)
def _isolated_settings(tmp_path: Path, monkeypatch: pytest.MonkeyPatch) -> None:
    monkeypatch.delenv("IPL_SEED", raising=False)
    monkeypatch.setenv("IPL_LOGS_DIR", str(tmp_path / "logs"))
    monkeypatch.setenv("IPL_OUTPUT_DIR", str(tmp_path / "runs"))


def _scm_file(tmp_path: Path) -> Path:
    config = ScmConfig(
        k=3,
        beta1=[1.0, 0.0, -1.0],
        beta2=[0.0, 1.0, 0.0],
        envs={"a": EnvParams(gamma=1.0, alpha=0.0), "b": EnvParams(gamma=-1.0, alpha=2.0)},
    )
    path = tmp_path / "scm.json"
    path.write_text(config.to_json(), encoding="utf-8")
    return path


def _shifted_csv(tmp_path: Path) -> Path:
    rng = np.random.default_rng(0)
    n = 400
    second = np.arange(n) >= n // 2
    data = EnvDataset.from_arrays(
        contexts=rng.standard_normal((n, 2)),
        actions=np.arange(n) % 2,
        rewards=10.0 * second + 0.1 * rng.standard_normal(n),
        propensities=np.full(n, 0.5),
        env_labels=np.where(second, "e1", "e0"),
        k=2,
    )
    return write_logged_csv(data, tmp_path / "logged.csv")


def test_help_lists_commands() -> None:
    result = runner.invoke(app, ["--help"])

    assert result.exit_code == 0
    for command in ("simulate", "test-invariance", "learn", "eval-acceptance", "pipeline-tabular"):
        assert command in result.output


def test_defaults_command() -> None:
    result = runner.invoke(app, ["defaults"])

    assert result.exit_code == 0
    assert "alpha" in result.output


def test_simulate_writes_rounds_and_manifest(tmp_path: Path) -> None:
    out = tmp_path / "sim" / "rounds.csv"
    result = runner.invoke(
        app,
        [
            "simulate",
            "--config",
            str(_scm_file(tmp_path)),
            "--env",
            "b",
            "--n",
            "120",
            "--seed",
            "3",
            "--out",
            str(out),
        ],
    )

    assert result.exit_code == 0, result.output
    frame = pd.read_csv(out)
    assert len(frame) == 120
    assert set(frame["env"]) == {"b"}
    manifest = json.loads((out.parent / "manifest.json").read_text(encoding="utf-8"))
    assert manifest["command"] == "simulate"
    assert manifest["seed"] == 3


def test_seed_override_from_environment(tmp_path: Path, monkeypatch: pytest.MonkeyPatch) -> None:
    monkeypatch.setenv("IPL_SEED", "42")
    out = tmp_path / "rounds.csv"
    args = ["simulate", "--config", str(_scm_file(tmp_path)), "--env", "a", "--n", "10"]

    assert main([*args, "--seed", "1", "--out", str(out)]) == 0
    manifest = json.loads((tmp_path / "manifest.json").read_text(encoding="utf-8"))
    assert manifest["seed"] == 42


def test_test_invariance_report(tmp_path: Path) -> None:
    out = tmp_path / "report.json"
    code = main(
        [
            "test-invariance",
            "--data",
            str(_shifted_csv(tmp_path)),
            "--subset",
            "",
            "--mode",
            "per-action",
            "--out",
            str(out),
        ]
    )

    assert code == 0
    report = json.loads(out.read_text(encoding="utf-8"))
    assert report["accepted"] is False
    assert report["test_policy_kind"] == "per-action"
    assert len(report["per_action_p_values"]) == 2


def test_learn_writes_result(tmp_path: Path) -> None:
    out = tmp_path / "learn" / "result.json"
    code = main(
        ["learn", "--data", str(_shifted_csv(tmp_path)), "--mode", "fixed", "--out", str(out)]
    )

    assert code == 0
    payload = json.loads(out.read_text(encoding="utf-8"))
    assert payload["best_policy"] is None
    assert payload["accepted"] == []
    assert (out.parent / "manifest.json").exists()


def test_exit_codes(tmp_path: Path) -> None:
    data = str(_shifted_csv(tmp_path))

    assert main(["simulate"]) == 1
    assert main(["test-invariance", "--data", data, "--subset", "0", "--mode", "bogus"]) == 1
    assert main(["test-invariance", "--data", str(tmp_path / "nope.csv"), "--subset", "0"]) == 2
    assert main(["test-invariance", "--data", data, "--subset", "5"]) == 2


def test_alpha_must_lie_strictly_inside_the_unit_interval(tmp_path: Path) -> None:
    data = str(_shifted_csv(tmp_path))

    for alpha in ("0", "1"):
        assert main(["test-invariance", "--data", data, "--subset", "", "--alpha", alpha]) == 1
        assert main(["learn", "--data", data, "--alpha", alpha]) == 1


def test_stdout_reports_still_write_a_manifest(tmp_path: Path) -> None:
    data = str(_shifted_csv(tmp_path))
    tested = runner.invoke(app, ["test-invariance", "--data", data, "--subset", ""])
    learned = runner.invoke(app, ["learn", "--data", data, "--mode", "fixed"])

    assert tested.exit_code == 0
    assert '"p_value"' in tested.output
    assert learned.exit_code == 0
    assert '"best_policy"' in learned.output
    for command in ("test-invariance", "learn"):
        manifest_path = tmp_path / "runs" / command / "manifest.json"
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        assert manifest["command"] == command
        assert manifest["outputs"] == []
