"""Semi-real pipeline on tabular dosing data.

Doses are bucketed into low/medium/high terciles and every bucket median
becomes an action; the reward of an action is minus the distance of the true
dose to its median. Research groups are clustered into environments by their
race mix, a logging policy is simulated, and invariant learning is compared
with prediction-driven baselines by leaving one environment out at a time.
"""

from __future__ import annotations

import math
from collections.abc import Mapping, Sequence
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field
from sklearn.cluster import KMeans
from sklearn.inspection import permutation_importance as sklearn_permutation_importance
from sklearn.linear_model import Ridge

from invariant_policy.config import DEFAULTS
from invariant_policy.core.types import EnvDataset, SubsetMask
from invariant_policy.data.tabular import GENETIC, TabularDataset
from invariant_policy.learning.learner import (
    LearnerConfig,
    defining_sets,
    enumerate_subsets,
    evaluate_subsets,
    intersect_accepted,
)
from invariant_policy.learning.policy_opt import OffPolicyValue, off_opt
from invariant_policy.stats.numerics import weighted_least_squares
from invariant_policy.utils.exceptions import (
    DataValidationError,
    ExperimentError,
    InvariantPolicyError,
)
from invariant_policy.utils.logger import get_logger
from invariant_policy.utils.parallel import parallel_map
from invariant_policy.utils.seeding import derive_seed, make_rng

logger = get_logger("invariant_policy.experiments.tabular_pipeline")

NONINVARIANT_COLUMN = "x_ninv"
METHODS = ("Inv", "Pred", "All", "Oracle-Inv")


@dataclass(frozen=True, eq=False)
class BucketSpec:
    """Tercile cut points and the median outcome inside each bucket."""

    boundaries: np.ndarray
    medians: np.ndarray

    def __post_init__(self) -> None:
        boundaries = np.asarray(self.boundaries, dtype=float)
        medians = np.asarray(self.medians, dtype=float)
        if boundaries.shape != (2,) or medians.shape != (3,):
            raise DataValidationError("BucketSpec needs 2 boundaries and 3 medians.")
        if boundaries[0] > boundaries[1]:
            raise DataValidationError(f"Bucket boundaries must be sorted: {boundaries}")
        edges = np.concatenate([[-np.inf], boundaries, [np.inf]])
        if np.any(medians < edges[:-1]) or np.any(medians > edges[1:]):
            raise DataValidationError(f"Bucket medians {medians} lie outside their buckets.")
        object.__setattr__(self, "boundaries", boundaries)
        object.__setattr__(self, "medians", medians)

    @classmethod
    def from_outcomes(cls, y: np.ndarray) -> BucketSpec:
        values = np.asarray(y, dtype=float)
        if values.size < 3:
            raise DataValidationError("Need at least three outcomes to form terciles.")
        boundaries = np.quantile(values, [1 / 3, 2 / 3])
        buckets = np.searchsorted(boundaries, values, side="right")
        medians = []
        for bucket, (low, high) in enumerate(
            zip([values.min(), *boundaries], [*boundaries, values.max()], strict=True)
        ):
            members = values[buckets == bucket]
            medians.append(float(np.median(members)) if members.size else (low + high) / 2)
        return cls(boundaries=boundaries, medians=np.asarray(medians))

    def bucket(self, y: np.ndarray) -> np.ndarray:
        return np.searchsorted(self.boundaries, np.asarray(y, dtype=float), side="right")


def bucketize_and_reward(y: float, action: int, spec: BucketSpec) -> float:
    """-|y - m(action)|; zero exactly when the dose equals the bucket median."""
    if not 0 <= action < spec.medians.size:
        raise DataValidationError(f"Action {action} outside 0..{spec.medians.size - 1}.")
    return -abs(float(y) - float(spec.medians[action]))


def reward_matrix(y: np.ndarray, spec: BucketSpec) -> np.ndarray:
    """Rewards of every action per row, shape ``(n, 3)``."""
    return -np.abs(np.asarray(y, dtype=float)[:, None] - spec.medians[None, :])


@dataclass(frozen=True, eq=False)
class ClusterResult:
    labels: np.ndarray
    inertia: float
    restart_inertias: tuple[float, ...]


def cluster_environments(
    proportions: np.ndarray,
    k_clusters: int = DEFAULTS.n_clusters,
    seed: int = DEFAULTS.seed,
    restarts: int = DEFAULTS.kmeans_restarts,
) -> ClusterResult:
    """Lloyd k-means over group race mixes; best inertia of ``restarts`` seeded runs.

    Labels are renumbered by first appearance so the assignment is canonical.
    """
    points = np.asarray(proportions, dtype=float)
    if points.ndim != 2 or points.shape[0] < k_clusters:
        raise DataValidationError(
            f"Need at least {k_clusters} groups to form {k_clusters} clusters, got {len(points)}."
        )
    if not np.allclose(points.sum(axis=1), 1.0, atol=1e-9, rtol=0.0):
        raise DataValidationError("Each group's proportions must sum to 1.")
    best_labels: np.ndarray | None = None
    best_inertia = math.inf
    inertias: list[float] = []
    for restart in range(restarts):
        model = KMeans(
            n_clusters=k_clusters,
            init="k-means++",
            n_init=1,
            algorithm="lloyd",
            random_state=derive_seed(seed, restart) % 2**32,
        ).fit(points)
        inertia = float(model.inertia_)
        inertias.append(inertia)
        if inertia < best_inertia:
            best_inertia, best_labels = inertia, model.labels_
    assert best_labels is not None
    order = {label: rank for rank, label in enumerate(dict.fromkeys(best_labels.tolist()))}
    relabeled = np.array([order[label] for label in best_labels.tolist()], dtype=np.int64)
    return ClusterResult(labels=relabeled, inertia=best_inertia, restart_inertias=tuple(inertias))


def group_race_proportions(dataset: TabularDataset) -> tuple[list[str], np.ndarray]:
    """Sorted group ids and each group's race mix (columns in sorted race order)."""
    if dataset.race is None:
        raise DataValidationError("Race metadata is required to cluster research groups.")
    table = pd.crosstab(
        pd.Series(dataset.group, name="group"),
        pd.Series(dataset.race, name="race"),
        normalize="index",
    )
    table = table.sort_index().reindex(sorted(table.columns), axis=1)
    return [str(group) for group in table.index], table.to_numpy(dtype=float)


def assign_environments(
    dataset: TabularDataset,
    k_clusters: int = DEFAULTS.n_clusters,
    seed: int = DEFAULTS.seed,
    restarts: int = DEFAULTS.kmeans_restarts,
) -> tuple[TabularDataset, dict[str, str]]:
    groups, proportions = group_race_proportions(dataset)
    result = cluster_environments(proportions, k_clusters, seed, restarts)
    mapping = {group: f"env{label}" for group, label in zip(groups, result.labels, strict=True)}
    logger.info("environments_assigned", groups=len(groups), inertia=result.inertia)
    return dataset.with_envs(mapping), mapping


def permutation_importance(
    features: pd.DataFrame,
    y: np.ndarray,
    n_permutations: int = 10,
    seed: int = DEFAULTS.seed,
    ridge_alpha: float = 1.0,
) -> pd.DataFrame:
    """Mean rise in MSE of a ridge fit when one column is shuffled, best first."""
    target = np.asarray(y, dtype=float)
    if np.ptp(target) == 0:
        raise DataValidationError("Permutation importance is undefined for a constant outcome.")
    model = Ridge(alpha=ridge_alpha).fit(features.to_numpy(dtype=float), target)
    result = sklearn_permutation_importance(
        model,
        features.to_numpy(dtype=float),
        target,
        scoring="neg_mean_squared_error",
        n_repeats=n_permutations,
        random_state=seed % 2**32,
    )
    return (
        pd.DataFrame(
            {
                "feature": [str(column) for column in features.columns],
                "importance_mean": result.importances_mean,
                "importance_std": result.importances_std,
            }
        )
        .sort_values("importance_mean", ascending=False, kind="stable")
        .reset_index(drop=True)
    )


def top_features(importance: pd.DataFrame, n: int = 10) -> list[str]:
    return [str(name) for name in importance["feature"].head(n)]


def build_noninvariant_feature(
    dataset: TabularDataset,
    genetic_cols: Sequence[str],
    env_gammas: Mapping[str, float],
) -> TabularDataset:
    """Replace the genetic columns by ``gamma_e * (x^G . beta)`` with pooled ``beta``."""
    missing_cols = [column for column in genetic_cols if column not in dataset.features.columns]
    if missing_cols:
        raise DataValidationError(f"Genetic columns not found: {missing_cols}")
    if dataset.env is None:
        raise DataValidationError("Environments must be assigned before perturbing features.")
    env = dataset.env.astype(str)
    missing_envs = sorted(set(env) - set(env_gammas))
    if missing_envs:
        raise DataValidationError(f"No gamma given for environments {missing_envs}.")
    genetic = dataset.features[list(genetic_cols)].to_numpy(dtype=float)
    beta = weighted_least_squares(genetic, dataset.y).slopes
    gammas = np.array([env_gammas[label] for label in env], dtype=float)
    features = dataset.features.drop(columns=list(genetic_cols))
    features[NONINVARIANT_COLUMN] = gammas * (genetic @ beta)
    return dataset.with_features(features)


class LoggingPolicyConfig(BaseModel):
    """pi0(a|x) ∝ exp(1 / max(|f_bmi(x) - m(a)|, floor) + weight * z(x_ninv) * (a - 1)).

    Mixed with the uniform policy at rate ``exploration`` so every action keeps
    positive propensity.
    """

    model_config = ConfigDict(frozen=True)

    bmi_col: str = "bmi"
    distance_floor: float = Field(default=1.0, gt=0.0)
    noninvariant_weight: float = 1.0
    exploration: float = Field(default=0.05, gt=0.0, le=1.0)


def logging_probabilities(
    train: TabularDataset, rows: TabularDataset, spec: BucketSpec, config: LoggingPolicyConfig
) -> np.ndarray:
    """Logging probabilities for ``rows``; the BMI dose model is fitted on ``train``."""
    if config.bmi_col not in train.features.columns:
        raise DataValidationError(f"Logging policy needs column '{config.bmi_col}'.")
    bmi_model = weighted_least_squares(train.features[config.bmi_col].to_numpy(), train.y)
    predicted = bmi_model.predict(rows.features[config.bmi_col].to_numpy())
    distance = np.maximum(np.abs(predicted[:, None] - spec.medians[None, :]), config.distance_floor)
    logits = 1.0 / distance
    if NONINVARIANT_COLUMN in rows.features.columns and config.noninvariant_weight:
        reference = train.features[NONINVARIANT_COLUMN].to_numpy()
        scale = reference.std() or 1.0
        z = (rows.features[NONINVARIANT_COLUMN].to_numpy() - reference.mean()) / scale
        logits = logits + config.noninvariant_weight * z[:, None] * (np.arange(3) - 1.0)[None, :]
    logits = logits - logits.max(axis=1, keepdims=True)
    soft = np.exp(logits)
    soft /= soft.sum(axis=1, keepdims=True)
    return (1.0 - config.exploration) * soft + config.exploration / 3.0


def simulate_logged_bandit(
    dataset: TabularDataset,
    spec: BucketSpec,
    config: LoggingPolicyConfig,
    seed: int,
) -> EnvDataset:
    """Draw one logged action per row; contexts are the feature columns."""
    if dataset.env is None:
        raise DataValidationError("Environments must be assigned before logging.")
    probs = logging_probabilities(dataset, dataset, spec, config)
    uniform = make_rng(seed).random(dataset.n)
    actions = np.minimum((probs.cumsum(axis=1) < uniform[:, None]).sum(axis=1), 2)
    rows = np.arange(dataset.n)
    return EnvDataset.from_arrays(
        dataset.features.to_numpy(dtype=float),
        actions,
        reward_matrix(dataset.y, spec)[rows, actions],
        probs[rows, actions],
        dataset.env,
        3,
    )


class TabularConfig(BaseModel):
    """Settings for the leave-one-environment-out study."""

    model_config = ConfigDict(frozen=True)

    n_clusters: int = Field(default=DEFAULTS.n_clusters, ge=2)
    kmeans_restarts: int = Field(default=DEFAULTS.kmeans_restarts, ge=1)
    top_k: int = Field(default=DEFAULTS.top_k, ge=1)
    top_by_value: int = Field(default=DEFAULTS.top_by_value, ge=1)
    top_features: int = Field(default=10, ge=1)
    n_permutations: int = Field(default=10, ge=1)
    alpha: float = Field(default=DEFAULTS.alpha, gt=0.0, lt=1.0)
    folds: int = Field(default=DEFAULTS.folds, ge=2)
    max_subset_size: int | None = Field(default=None, ge=0)
    semi_real: bool = True
    gammas: list[float] = Field(default_factory=lambda: [1.0, -1.0, 2.0, -2.0])
    genetic_cols: list[str] = Field(default_factory=lambda: list(GENETIC))
    defining_set_size: int = Field(default=2, ge=1)
    logging: LoggingPolicyConfig = LoggingPolicyConfig()
    seed: int = DEFAULTS.seed

    def env_gammas(self, envs: Sequence[str]) -> dict[str, float]:
        ordered = sorted(envs)
        if len(self.gammas) < len(ordered):
            raise ExperimentError(
                f"{len(ordered)} environments but only {len(self.gammas)} gamma values."
            )
        return {env: self.gammas[i] for i, env in enumerate(ordered)}


@dataclass(frozen=True)
class LeaveOneOutRow:
    env: str
    method: str
    policy_rank: int
    subset: str
    value: float
    error: str = ""


@dataclass(eq=False)
class TabularPipelineResult:
    rows: list[LeaveOneOutRow]
    invariant_sets: dict[str, Any]
    importance: pd.DataFrame
    environments: dict[str, str]
    features: list[str] = field(default_factory=list)

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(row) for row in self.rows])


def _subset_values(
    logged: EnvDataset, subsets: Sequence[SubsetMask], folds: int, seed: int
) -> dict[SubsetMask, OffPolicyValue]:
    values: dict[SubsetMask, OffPolicyValue] = {}
    for rank, subset in enumerate(subsets):
        try:
            values[subset] = off_opt(logged, subset, folds, derive_seed(seed, rank))
        except InvariantPolicyError as exc:
            logger.warning("subset_value_failed", subset=subset.label(), error=str(exc))
    return values


def _top_by_value(
    candidates: Sequence[SubsetMask], values: Mapping[SubsetMask, OffPolicyValue], n: int
) -> list[SubsetMask]:
    ranked = [subset for subset in candidates if subset in values]
    return sorted(ranked, key=lambda subset: -values[subset].value)[:n]


@dataclass(frozen=True, eq=False)
class _HoldoutJob:
    dataset: TabularDataset
    env: str
    index: int
    config: TabularConfig


def _holdout_rows(job: _HoldoutJob) -> list[LeaveOneOutRow]:
    """Rows of one held-out environment; a failed arm yields one error row per method."""
    try:
        return _score_holdout(job)
    except InvariantPolicyError as exc:
        logger.warning("holdout_failed", env=job.env, error=str(exc))
        return [LeaveOneOutRow(job.env, method, 0, "", math.nan, str(exc)) for method in METHODS]


def _score_holdout(job: _HoldoutJob) -> list[LeaveOneOutRow]:
    config = job.config
    env = np.asarray(job.dataset.env, dtype=object)
    train = job.dataset.take(np.flatnonzero(env != job.env))
    test = job.dataset.take(np.flatnonzero(env == job.env))
    spec = BucketSpec.from_outcomes(train.y)
    arm_seed = derive_seed(config.seed, 10, job.index)
    logged = simulate_logged_bandit(train, spec, config.logging, derive_seed(arm_seed, 0))
    names = train.feature_names
    subsets = enumerate_subsets(len(names), config.max_subset_size)
    full = SubsetMask.full(len(names))
    valued = subsets if full in subsets else [*subsets, full]
    values = _subset_values(logged, valued, config.folds, derive_seed(arm_seed, 1))

    learner_config = LearnerConfig(
        alpha=config.alpha,
        test_mode="per-action",
        max_subset_size=config.max_subset_size,
        seed=derive_seed(arm_seed, 2),
    )
    chosen: dict[str, list[SubsetMask]] = {}
    errors: dict[str, str] = {}
    try:
        outcomes = evaluate_subsets(logged, learner_config, with_value=False)
        scored = [
            (item.subset, item.report.p_value) for item in outcomes if item.report is not None
        ]
        top = [subset for subset, _ in sorted(scored, key=lambda pair: -pair[1])[: config.top_k]]
        chosen["Inv"] = _top_by_value(top, values, config.top_by_value)
    except InvariantPolicyError as exc:
        errors["Inv"] = str(exc)
    chosen["Pred"] = _top_by_value(subsets, values, config.top_by_value)
    chosen["All"] = [full]
    if NONINVARIANT_COLUMN in names:
        excluded = names.index(NONINVARIANT_COLUMN)
        oracle = [subset for subset in subsets if excluded not in subset.indices]
        chosen["Oracle-Inv"] = _top_by_value(oracle, values, config.top_by_value)

    test_rewards = reward_matrix(test.y, spec)
    test_contexts = test.features.to_numpy(dtype=float)
    rows: list[LeaveOneOutRow] = []
    for method in METHODS:
        if method in errors:
            rows.append(LeaveOneOutRow(job.env, method, 0, "", math.nan, errors[method]))
            continue
        if method not in chosen:
            continue
        if not chosen[method]:
            rows.append(LeaveOneOutRow(job.env, method, 0, "", math.nan, "no valued subset"))
            continue
        for rank, subset in enumerate(chosen[method], start=1):
            if subset not in values:
                rows.append(
                    LeaveOneOutRow(job.env, method, rank, subset.label(names), math.nan, "off_opt")
                )
                continue
            actions = values[subset].policy.choose(test_contexts)
            value = float(test_rewards[np.arange(test.n), actions].mean())
            rows.append(LeaveOneOutRow(job.env, method, rank, subset.label(names), value))
    logger.info("holdout_finished", env=job.env, rows=len(rows))
    return rows


def leave_one_env_out(
    dataset: TabularDataset, config: TabularConfig, jobs: int = 1
) -> list[LeaveOneOutRow]:
    """Train every method without one environment and score it there with true rewards."""
    envs = dataset.envs
    if len(envs) < 2:
        raise ExperimentError("Leaving one environment out needs at least two environments.")
    job_list = [
        _HoldoutJob(dataset=dataset, env=env, index=index, config=config)
        for index, env in enumerate(sorted(envs))
    ]
    return [row for chunk in parallel_map(_holdout_rows, job_list, jobs) for row in chunk]


def invariant_set_analysis(dataset: TabularDataset, config: TabularConfig) -> dict[str, Any]:
    """Accepted sets on all environments, their intersection and the defining sets."""
    spec = BucketSpec.from_outcomes(dataset.y)
    logged = simulate_logged_bandit(
        dataset, spec, config.logging, derive_seed(config.seed, 20)
    )
    names = dataset.feature_names
    learner_config = LearnerConfig(
        alpha=config.alpha,
        test_mode="per-action",
        max_subset_size=config.max_subset_size,
        seed=derive_seed(config.seed, 21),
    )
    outcomes = evaluate_subsets(logged, learner_config, with_value=False)
    accepted = [item.subset for item in outcomes if item.accepted]
    scored = [(item.subset, item.report.p_value) for item in outcomes if item.report is not None]
    ranked = sorted(scored, key=lambda pair: -pair[1])
    return {
        "features": names,
        "top_sets": [
            {"subset": subset.label(names), "p_value": p_value}
            for subset, p_value in ranked[: config.top_k]
        ],
        "accepted": [subset.label(names) for subset in accepted],
        "intersection": intersect_accepted(accepted).label(names) if accepted else None,
        "defining_sets": (
            [item.label(names) for item in defining_sets(accepted, config.defining_set_size)]
            if accepted
            else []
        ),
    }


def run_tabular_pipeline(
    dataset: TabularDataset, config: TabularConfig, jobs: int = 1
) -> TabularPipelineResult:
    """Cluster, optionally inject the non-invariant feature, select features and evaluate."""
    with_envs, mapping = assign_environments(
        dataset, config.n_clusters, config.seed, config.kmeans_restarts
    )
    if config.semi_real:
        with_envs = build_noninvariant_feature(
            with_envs, config.genetic_cols, config.env_gammas(with_envs.envs)
        )
    importance = permutation_importance(
        with_envs.features, with_envs.y, config.n_permutations, derive_seed(config.seed, 30)
    )
    # the logging policy always sees its own covariate
    selected = {*top_features(importance, config.top_features), config.logging.bmi_col}
    working = with_envs.select([name for name in with_envs.feature_names if name in selected])
    rows = leave_one_env_out(working, config, jobs)
    analysis = invariant_set_analysis(working, config)
    return TabularPipelineResult(
        rows=rows,
        invariant_sets=analysis,
        importance=importance,
        environments=mapping,
        features=working.feature_names,
    )
