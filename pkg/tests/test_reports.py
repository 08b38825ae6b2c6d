import json
from pathlib import Path

import pandas as pd
import pytest

from invariant_policy import __version__
from invariant_policy.reports.formatter import (
    fmt_number,
    fmt_pvalue,
    frame_table,
    method_summary,
    regret_summary,
)
from invariant_policy.reports.generator import (
    RunManifest,
    config_hash,
    write_json,
    write_manifest,
    write_trajectory_csv,
)
from invariant_policy.utils.exceptions import ReportGenerationError


def test_number_formatting() -> None:
    assert fmt_number(1234.5678) == "1,234.568"
    assert fmt_number(None) == "N/A"
    assert fmt_number(float("nan")) == "N/A"
    assert fmt_number("label") == "label"
    assert fmt_pvalue(0.5) == "0.5000"
    assert fmt_pvalue(1.5e-5) == "1.50e-05"


def test_config_hash_ignores_key_order() -> None:
    assert config_hash({"a": 1, "b": [1, 2]}) == config_hash({"b": [1, 2], "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})
    assert len(config_hash({})) == 64


def test_write_json_sorts_keys(tmp_path: Path) -> None:
    path = write_json({"b": 1, "a": 2}, tmp_path / "out" / "doc.json")

    assert list(json.loads(path.read_text(encoding="utf-8"))) == ["a", "b"]


def test_write_json_wraps_failures(tmp_path: Path) -> None:
    blocker = tmp_path / "file"
    blocker.write_text("x", encoding="utf-8")

    with pytest.raises(ReportGenerationError):
        write_json({"a": 1}, blocker / "doc.json")


def test_manifest_written_with_version(tmp_path: Path) -> None:
    manifest = RunManifest(
        command="learn",
        config_hash=config_hash({"alpha": 0.05}),
        seed=3,
        started_at="2024-01-01T00:00:00+00:00",
        wall_time_seconds=1.5,
        outputs=["result.json"],
    )
    path = write_manifest(manifest, tmp_path)
    payload = json.loads(path.read_text(encoding="utf-8"))

    assert path.name == "manifest.json"
    assert payload["version"] == __version__
    assert payload["seed"] == 3


def test_trajectory_csv_columns(tmp_path: Path) -> None:
    rows = [{"iteration": 0, "p_value": 0.4, "grad_norm": 1.0, "theta_norm": 0.1}]
    path = write_trajectory_csv(rows, tmp_path / "trajectory.csv")

    assert pd.read_csv(path).to_dict("records") == rows


def test_summaries() -> None:
    regrets = pd.DataFrame(
        {
            "train_envs": [2, 2, 2, 2],
            "policy": ["invariant", "invariant", "non-invariant", "non-invariant"],
            "regret": [0.1, 0.3, 0.5, 1.5],
        }
    )
    summary = regret_summary(regrets)

    assert summary["mean_regret"].tolist() == pytest.approx([0.2, 1.0])
    assert summary["max_regret"].tolist() == pytest.approx([0.3, 1.5])
    assert frame_table(summary, "Regret").row_count == 2

    values = pd.DataFrame(
        {
            "env": ["env0", "env0", "env1"],
            "method": ["Inv", "Pred", "Inv"],
            "value": [-1.0, -2.0, float("nan")],
        }
    )
    methods = method_summary(values)
    assert methods["env"].tolist() == ["env0"]
    assert methods["Inv"].tolist() == [-1.0]
