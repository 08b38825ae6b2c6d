"""Tabular dosing-style datasets: CSV ingestion and a synthetic generator.

The synthetic generator mimics a multi-site anticoagulant dosing cohort:
21 research groups with differing race mixes, four demographic, four clinical
and two genetic features. Demographics and clinical practice follow the race
profile; allele frequencies are the same for everyone. The stable weekly dose
is linear plus Gaussian noise:

    dose = 75 - 4.5 age + 0.25 (height - 170) + 0.35 (weight - 75)
           - 12 vkorc1 - 8 cyp2c9 + 12 enzyme_inducer - 12 amiodarone
           + 10 (target_inr - 2.5) + N(0, 5^2)

clipped below at 5 mg.
"""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from invariant_policy.data.validator import IngestionSummary, drop_incomplete_rows
from invariant_policy.utils.exceptions import DataValidationError
from invariant_policy.utils.seeding import SeedLike, make_rng

DEMOGRAPHIC = ("age", "height", "weight", "bmi")
CLINICAL = ("amiodarone", "enzyme_inducer", "indication", "target_inr")
GENETIC = ("vkorc1", "cyp2c9")
FEATURE_COLUMNS = DEMOGRAPHIC + CLINICAL + GENETIC
RACES = ("asian", "black", "white", "other")

OUTCOME_COLUMN = "dose"
GROUP_COLUMN = "group"
RACE_COLUMN = "race"

# per-race: height mean, weight mean, age decade centre, amiodarone rate,
# enzyme-inducer rate, P(target INR = 2.0, 2.5, 3.0)
_RACE_PROFILE = {
    "asian": (162.0, 60.0, 6.5, 0.02, 0.01, (0.45, 0.45, 0.10)),
    "black": (172.0, 90.0, 3.5, 0.20, 0.12, (0.10, 0.45, 0.45)),
    "white": (174.0, 82.0, 6.0, 0.10, 0.04, (0.20, 0.60, 0.20)),
    "other": (166.0, 72.0, 4.5, 0.05, 0.06, (0.30, 0.50, 0.20)),
}
TARGET_INR_LEVELS = (2.0, 2.5, 3.0)
VKORC1_FREQ = 0.45
CYP2C9_FREQ = 0.08


@dataclass(frozen=True, eq=False)
class TabularDataset:
    """Features, outcome and grouping of one cohort; no missing values."""

    features: pd.DataFrame
    y: np.ndarray
    group: np.ndarray
    race: np.ndarray | None = None
    env: np.ndarray | None = None

    def __post_init__(self) -> None:
        n = len(self.features)
        for name, values in (("y", self.y), ("group", self.group), ("race", self.race)):
            if values is not None and len(values) != n:
                raise DataValidationError(f"'{name}' has {len(values)} rows, features have {n}.")
        if self.env is not None and len(self.env) != n:
            raise DataValidationError("Environment labels must have one entry per row.")
        if self.features.isna().any().any() or not np.all(np.isfinite(self.y)):
            raise DataValidationError("Tabular data must be complete and finite.")

    @property
    def n(self) -> int:
        return len(self.features)

    @property
    def feature_names(self) -> list[str]:
        return [str(column) for column in self.features.columns]

    @property
    def envs(self) -> list[str]:
        if self.env is None:
            raise DataValidationError("Environments have not been assigned.")
        return list(dict.fromkeys(str(label) for label in self.env))

    def with_envs(self, group_to_env: Mapping[str, str]) -> TabularDataset:
        missing = sorted({str(g) for g in self.group} - set(group_to_env))
        if missing:
            raise DataValidationError(f"No environment for groups {missing}.")
        env = np.asarray([group_to_env[str(g)] for g in self.group], dtype=object)
        return TabularDataset(self.features, self.y, self.group, self.race, env)

    def with_features(self, features: pd.DataFrame) -> TabularDataset:
        return TabularDataset(
            features.reset_index(drop=True), self.y, self.group, self.race, self.env
        )

    def select(self, columns: Sequence[str]) -> TabularDataset:
        return self.with_features(self.features[list(columns)])

    def take(self, rows: np.ndarray) -> TabularDataset:
        idx = np.asarray(rows)
        return TabularDataset(
            self.features.iloc[idx].reset_index(drop=True),
            self.y[idx],
            self.group[idx],
            None if self.race is None else self.race[idx],
            None if self.env is None else self.env[idx],
        )

    @classmethod
    def from_frame(
        cls,
        frame: pd.DataFrame,
        feature_cols: Sequence[str] | None = None,
        outcome_col: str = OUTCOME_COLUMN,
        group_col: str = GROUP_COLUMN,
        race_col: str | None = RACE_COLUMN,
    ) -> tuple[TabularDataset, IngestionSummary]:
        """Drop incomplete rows and split into features, outcome and metadata."""
        race = race_col if race_col is not None and race_col in frame.columns else None
        excluded = {outcome_col, group_col, race}
        columns = (
            list(feature_cols)
            if feature_cols is not None
            else [column for column in frame.columns if column not in excluded]
        )
        required = [*columns, outcome_col, group_col] + ([race] if race else [])
        clean, summary = drop_incomplete_rows(frame, required)
        try:
            features = clean[columns].astype(float)
            y = clean[outcome_col].to_numpy(dtype=float)
        except (TypeError, ValueError) as exc:
            raise DataValidationError(f"Non-numeric feature or outcome column: {exc}") from exc
        dataset = cls(
            features=features,
            y=y,
            group=clean[group_col].astype(str).to_numpy(dtype=object),
            race=None if race is None else clean[race].astype(str).to_numpy(dtype=object),
        )
        return dataset, summary


def load_tabular_csv(
    path: Path,
    outcome_col: str = OUTCOME_COLUMN,
    group_col: str = GROUP_COLUMN,
    race_col: str | None = RACE_COLUMN,
) -> tuple[TabularDataset, IngestionSummary]:
    try:
        frame = pd.read_csv(path)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise DataValidationError(f"Cannot read tabular data {path}: {exc}") from exc
    return TabularDataset.from_frame(
        frame, outcome_col=outcome_col, group_col=group_col, race_col=race_col
    )


def generate_synthetic_tabular(
    n: int = 5_700, n_groups: int = 21, seed: SeedLike = 0
) -> pd.DataFrame:
    """Synthetic cohort with the column layout ``group, race, <features>, dose``."""
    if n < n_groups or n_groups < 1:
        raise DataValidationError(f"Need n >= n_groups >= 1, got n={n}, n_groups={n_groups}.")
    rng = make_rng(seed)
    # each group leans towards one race, cycling through the four
    concentration = 1.0 + 20.0 * np.eye(len(RACES))[np.arange(n_groups) % len(RACES)]
    mixes = np.vstack([rng.dirichlet(row) for row in concentration])
    sizes = rng.multinomial(n - n_groups, np.full(n_groups, 1.0 / n_groups)) + 1
    group_index = np.repeat(np.arange(n_groups), sizes)

    race_index = np.array([rng.choice(len(RACES), p=mixes[g]) for g in group_index])
    races = np.asarray(RACES, dtype=object)[race_index]
    profiles = [_RACE_PROFILE[race] for race in RACES]
    numeric = np.array([profile[:5] for profile in profiles])[race_index]
    inr_probs = np.array([profile[5] for profile in profiles])[race_index]

    age = np.clip(np.round(numeric[:, 2] + 1.2 * rng.standard_normal(n)), 1.0, 9.0)
    height = numeric[:, 0] + 9.0 * rng.standard_normal(n)
    weight = np.clip(numeric[:, 1] + 14.0 * rng.standard_normal(n), 40.0, None)
    bmi = weight / (height / 100.0) ** 2
    amiodarone = (rng.random(n) < numeric[:, 3]).astype(float)
    enzyme_inducer = (rng.random(n) < numeric[:, 4]).astype(float)
    indication = rng.integers(0, 3, size=n).astype(float)
    inr_level = (inr_probs.cumsum(axis=1) < rng.random(n)[:, None]).sum(axis=1)
    target_inr = np.asarray(TARGET_INR_LEVELS)[np.minimum(inr_level, 2)]
    vkorc1 = rng.binomial(2, VKORC1_FREQ, size=n).astype(float)
    cyp2c9 = rng.binomial(2, CYP2C9_FREQ, size=n).astype(float)

    dose = (
        75.0
        - 4.5 * age
        + 0.25 * (height - 170.0)
        + 0.35 * (weight - 75.0)
        - 12.0 * vkorc1
        - 8.0 * cyp2c9
        + 12.0 * enzyme_inducer
        - 12.0 * amiodarone
        + 10.0 * (target_inr - 2.5)
        + 5.0 * rng.standard_normal(n)
    )
    dose = np.clip(dose, 5.0, None)

    return pd.DataFrame(
        {
            GROUP_COLUMN: [f"g{g:02d}" for g in group_index],
            RACE_COLUMN: races,
            "age": age,
            "height": height,
            "weight": weight,
            "bmi": bmi,
            "amiodarone": amiodarone,
            "enzyme_inducer": enzyme_inducer,
            "indication": indication,
            "target_inr": target_inr,
            "vkorc1": vkorc1,
            "cyp2c9": cyp2c9,
            OUTCOME_COLUMN: dose,
        }
    )
