"""Formatting helpers for console summaries."""

from __future__ import annotations

import math
from collections.abc import Sequence
from datetime import datetime, timezone
from typing import Any

import pandas as pd
from rich.table import Table

from invariant_policy.config import DEFAULTS


def fmt_number(value: Any, digits: int = 3) -> str:
    if value is None:
        return "N/A"
    try:
        number = float(value)
    except (TypeError, ValueError):
        return str(value)
    if math.isnan(number):
        return "N/A"
    return f"{number:,.{digits}f}"


def fmt_pvalue(value: Any) -> str:
    if value is None:
        return "N/A"
    number = float(value)
    return f"{number:.2e}" if 0 < number < 1e-3 else f"{number:.4f}"


def now_utc_iso() -> str:
    return datetime.now(tz=timezone.utc).isoformat()


def defaults_table() -> Table:
    table = Table(title="Defaults")
    table.add_column("Name")
    table.add_column("Value", justify="right")
    for name, value in DEFAULTS.as_rows():
        table.add_row(name, value)
    return table


def frame_table(frame: pd.DataFrame, title: str, columns: Sequence[str] | None = None) -> Table:
    """Render selected DataFrame columns as a rich table."""
    table = Table(title=title)
    shown = list(columns) if columns is not None else [str(c) for c in frame.columns]
    for column in shown:
        numeric = pd.api.types.is_numeric_dtype(frame[column])
        table.add_column(column, justify="right" if numeric else "left")
    for record in frame[shown].itertuples(index=False):
        table.add_row(
            *(fmt_number(v) if isinstance(v, float) else str(v) for v in record)
        )
    return table


def regret_summary(frame: pd.DataFrame) -> pd.DataFrame:
    """Mean and worst-case regret per training-environment count and policy."""
    return (
        frame.groupby(["train_envs", "policy"], sort=True)["regret"]
        .agg(mean_regret="mean", max_regret="max")
        .reset_index()
    )


def method_summary(frame: pd.DataFrame) -> pd.DataFrame:
    """Mean held-out value per environment and method."""
    return (
        frame.dropna(subset=["value"])
        .groupby(["env", "method"], sort=True)["value"]
        .mean()
        .unstack("method")
        .reset_index()
    )
