"""Output writers for run artifacts: CSV tables, JSON documents and the run manifest."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any

import pandas as pd
from pydantic import BaseModel, ConfigDict

from invariant_policy import __version__
from invariant_policy.utils.exceptions import ReportGenerationError


def canonical_json(payload: Any) -> str:
    return json.dumps(payload, indent=2, sort_keys=True, default=str)


def config_hash(payload: Any) -> str:
    """SHA-256 of the canonical JSON form of ``payload``."""
    compact = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(compact.encode("utf-8")).hexdigest()


def write_json(payload: Any, output: Path) -> Path:
    """Persist a JSON document with sorted keys."""
    try:
        output.parent.mkdir(parents=True, exist_ok=True)
        output.write_text(canonical_json(payload) + "\n", encoding="utf-8")
        return output
    except Exception as exc:  # noqa: BLE001
        raise ReportGenerationError(f"Failed to write {output}: {exc}") from exc


def write_frame_csv(frame: pd.DataFrame, output: Path) -> Path:
    try:
        output.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(output, index=False, lineterminator="\n")
        return output
    except Exception as exc:  # noqa: BLE001
        raise ReportGenerationError(f"Failed to write {output}: {exc}") from exc


def write_trajectory_csv(trajectory: list[dict[str, Any]], output: Path) -> Path:
    """Power-optimization diagnostics, one row per iteration."""
    columns = ["iteration", "p_value", "grad_norm", "theta_norm"]
    return write_frame_csv(pd.DataFrame(trajectory, columns=columns), output)


class RunManifest(BaseModel):
    model_config = ConfigDict(frozen=True)

    command: str
    config_hash: str
    seed: int
    version: str = __version__
    started_at: str
    wall_time_seconds: float
    outputs: list[str]


def write_manifest(manifest: RunManifest, output_dir: Path) -> Path:
    """Written last, after every other artifact of the run."""
    return write_json(manifest.model_dump(mode="json"), output_dir / "manifest.json")
