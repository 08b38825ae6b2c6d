"""Validation checks for ingested tabular and bandit datasets."""

from __future__ import annotations

from collections.abc import Sequence

import pandas as pd
from pydantic import BaseModel, ConfigDict, Field

from invariant_policy.utils.exceptions import DataValidationError


class IngestionSummary(BaseModel):
    """Ingestion summary metadata for reporting."""

    model_config = ConfigDict(frozen=True)

    total_rows: int
    valid_rows: int
    dropped_rows: int
    missing_by_column: dict[str, int]
    completeness_ratio: float = Field(ge=0.0, le=1.0)


def validate_required_columns(frame: pd.DataFrame, required: Sequence[str]) -> None:
    missing = [column for column in required if column not in frame.columns]
    if missing:
        raise DataValidationError(f"Missing required columns: {missing}")


def drop_incomplete_rows(
    frame: pd.DataFrame, required: Sequence[str]
) -> tuple[pd.DataFrame, IngestionSummary]:
    """Drop rows with a missing required field and count what was dropped."""
    validate_required_columns(frame, required)
    subset = frame[list(required)]
    blank = subset.isna() | subset.astype(str).apply(lambda col: col.str.strip().isin(["", "nan"]))
    incomplete = blank.any(axis=1)

    total = len(frame)
    valid = int((~incomplete).sum())
    if total > 0 and valid == 0:
        raise DataValidationError("All rows are missing a required field; nothing to analyse.")

    summary = IngestionSummary(
        total_rows=total,
        valid_rows=valid,
        dropped_rows=total - valid,
        missing_by_column={column: int(blank[column].sum()) for column in required},
        completeness_ratio=(valid / total) if total else 0.0,
    )
    return frame.loc[~incomplete].reset_index(drop=True), summary
