"""Logged bandit data as CSV: ``x0,...,x{d-1},action,reward,propensity,env``."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pandas as pd

from invariant_policy.core.types import EnvDataset
from invariant_policy.utils.exceptions import DataValidationError, ReportGenerationError

FIXED_COLUMNS = ("action", "reward", "propensity", "env")


def context_columns(d: int) -> list[str]:
    return [f"x{i}" for i in range(d)]


def dataset_to_frame(data: EnvDataset) -> pd.DataFrame:
    frame = pd.DataFrame(data.contexts, columns=context_columns(data.d))
    frame["action"] = data.actions.astype(np.int64)
    frame["reward"] = data.rewards
    frame["propensity"] = data.propensities
    frame["env"] = data.env_labels.astype(str)
    return frame


def write_logged_csv(data: EnvDataset, path: Path) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        dataset_to_frame(data).to_csv(path, index=False, lineterminator="\n")
    except OSError as exc:
        raise ReportGenerationError(f"Failed to write logged data to {path}: {exc}") from exc
    return path


def frame_to_dataset(frame: pd.DataFrame, k: int | None = None) -> EnvDataset:
    """Parse the logged-data layout; ``k`` defaults to the largest logged action + 1."""
    missing = [column for column in FIXED_COLUMNS if column not in frame.columns]
    if missing:
        raise DataValidationError(f"Logged data is missing columns: {missing}")
    d = sum(1 for column in frame.columns if column.startswith("x") and column[1:].isdigit())
    expected = context_columns(d)
    if list(frame.columns[:d]) != expected:
        raise DataValidationError(f"Context columns must be {expected} in order.")
    if frame.empty:
        raise DataValidationError("Logged data has no rows.")
    try:
        actions = frame["action"].to_numpy(dtype=np.int64)
        contexts = frame[expected].to_numpy(dtype=float)
        rewards = frame["reward"].to_numpy(dtype=float)
        propensities = frame["propensity"].to_numpy(dtype=float)
    except (TypeError, ValueError) as exc:
        raise DataValidationError(f"Non-numeric logged data: {exc}") from exc
    n_actions = int(actions.max()) + 1 if k is None else k
    return EnvDataset.from_arrays(
        contexts, actions, rewards, propensities, frame["env"].astype(str).to_numpy(), n_actions
    )


def read_logged_csv(path: Path, k: int | None = None) -> EnvDataset:
    try:
        frame = pd.read_csv(path, dtype={"env": str}, keep_default_na=False)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise DataValidationError(f"Cannot read logged data {path}: {exc}") from exc
    return frame_to_dataset(frame, k)
