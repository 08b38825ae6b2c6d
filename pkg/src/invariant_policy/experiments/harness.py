"""Simulation experiments with ground-truth values.

``run_generalization_experiment`` trains the {X2}-greedy and {X1, X2}-greedy
policies on pooled training environments and reports their regret on unseen
environments. ``run_acceptance_experiment`` measures how often the invariance
test accepts each subset as the sample size grows.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Literal

import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, field_validator

from invariant_policy.config import DEFAULTS
from invariant_policy.core.policies import Policy, UniformPolicy
from invariant_policy.core.types import EnvDataset, SubsetMask
from invariant_policy.invariance.power import (
    PowerOptConfig,
    SoftmaxParams,
    test_invariance_opt_policy,
)
from invariant_policy.invariance.resampler import parse_m_rule
from invariant_policy.invariance.target_test import (
    test_invariance_fixed_policy,
    test_invariance_per_action,
)
from invariant_policy.learning.learner import enumerate_subsets
from invariant_policy.learning.policy_opt import fit_weighted_q, greedy_policy
from invariant_policy.simulation.scm import (
    CONTEXT_DIM,
    EnvParams,
    ScmConfig,
    env_distance,
    extreme_env_grid,
    make_initial_policy,
    monte_carlo_value,
    oracle_policy,
    sample_env_params,
    sample_pooled,
    sample_scm_config,
)
from invariant_policy.utils.exceptions import ExperimentError, InvariantPolicyError
from invariant_policy.utils.logger import get_logger
from invariant_policy.utils.parallel import parallel_map
from invariant_policy.utils.seeding import derive_seed

logger = get_logger("invariant_policy.experiments.harness")

INVARIANT_SUBSET = SubsetMask((1,))
FULL_SUBSET = SubsetMask((0, 1))
POLICY_SUBSETS = {"invariant": INVARIANT_SUBSET, "non-invariant": FULL_SUBSET}


class ExperimentConfig(BaseModel):
    """Shared settings of both simulation experiments."""

    model_config = ConfigDict(frozen=True)

    scm: ScmConfig | None = None
    confounded: bool = True
    train_env_counts: list[int] = Field(default_factory=lambda: [2, 6])
    n_grid: list[int] = Field(default_factory=lambda: [1_000, 3_000, 9_000, 27_000])
    repetitions: int = Field(default=DEFAULTS.repetitions, ge=1)
    n_train: int = Field(default=DEFAULTS.n_train, ge=1)
    n_warmup: int = Field(default=DEFAULTS.n_warmup, ge=1)
    n_test_envs: int = Field(default=40, ge=1)
    test_env_scale: float = Field(default=2.0, gt=0.0)
    extreme_grid: bool = False
    n_mc: int = Field(default=DEFAULTS.n_mc, ge=2)
    alpha: float = Field(default=DEFAULTS.alpha, gt=0.0, lt=1.0)
    test_mode: Literal["fixed", "per-action", "power-opt"] = "fixed"
    m_rule: str = DEFAULTS.m_rule
    power_opt: PowerOptConfig = PowerOptConfig()
    seed: int = DEFAULTS.seed

    @field_validator("train_env_counts")
    @classmethod
    def _positive_counts(cls, value: list[int]) -> list[int]:
        if not value or any(count < 1 for count in value):
            raise ValueError("train_env_counts must be non-empty positive integers.")
        return value

    @field_validator("n_grid")
    @classmethod
    def _sorted_grid(cls, value: list[int]) -> list[int]:
        if not value or value != sorted(value) or value[0] < 1:
            raise ValueError("n_grid must be non-empty, positive and sorted ascending.")
        return value


@dataclass(frozen=True)
class RegretRow:
    env: str
    train_envs: int
    distance: float
    policy: str
    value: float
    regret: float
    se: float


@dataclass(frozen=True)
class AcceptanceRow:
    subset: str
    n: int
    envs: int
    accept_rate: float
    reps: int
    failures: int


def rows_to_frame(rows: list[RegretRow] | list[AcceptanceRow]) -> pd.DataFrame:
    return pd.DataFrame([asdict(row) for row in rows])


def policy_value_true(
    config: ScmConfig, env: str, policy: Policy, n_mc: int = DEFAULTS.n_mc, seed: int = 0
) -> float:
    return monte_carlo_value(config, env, policy, n_mc, seed).mean


def regret(
    config: ScmConfig, env: str, policy: Policy, n_mc: int = DEFAULTS.n_mc, seed: int = 0
) -> float:
    """Oracle value minus policy value on common random numbers."""
    return policy_value_true(config, env, oracle_policy(config, env), n_mc, seed) - (
        policy_value_true(config, env, policy, n_mc, seed)
    )


def base_scm(config: ExperimentConfig) -> ScmConfig:
    """Explicit SCM, or one sampled with as many training environments as the largest arm."""
    needed = max(config.train_env_counts)
    if config.scm is None:
        return sample_scm_config(needed, derive_seed(config.seed, 0), confounded=config.confounded)
    if len(config.scm.envs) < needed:
        raise ExperimentError(
            f"SCM defines {len(config.scm.envs)} environments; the largest arm needs {needed}."
        )
    return config.scm


def _train_envs(scm: ScmConfig, count: int) -> dict[str, EnvParams]:
    return dict(list(scm.envs.items())[:count])


def logged_training_data(
    scm: ScmConfig, envs: list[str], n: int, n_warmup: int, seed: int
) -> EnvDataset:
    """Uniform warm-up fixes pi0, then ``n`` pooled rounds are logged under pi0."""
    warmup = sample_pooled(
        scm, envs, UniformPolicy(k=scm.k, d=CONTEXT_DIM), n_warmup, derive_seed(seed, 0)
    )
    initial = make_initial_policy(warmup)
    return sample_pooled(scm, envs, initial, n, derive_seed(seed, 1))


@dataclass(frozen=True, eq=False)
class _RegretJob:
    scm: ScmConfig
    env: str
    train_envs: int
    distance: float
    policies: dict[str, Policy]
    n_mc: int
    seed: int


def _regret_rows(job: _RegretJob) -> list[RegretRow]:
    oracle_rule = oracle_policy(job.scm, job.env)
    oracle = monte_carlo_value(job.scm, job.env, oracle_rule, job.n_mc, job.seed)
    rows = []
    for label, policy in job.policies.items():
        value = monte_carlo_value(job.scm, job.env, policy, job.n_mc, job.seed)
        rows.append(
            RegretRow(
                env=job.env,
                train_envs=job.train_envs,
                distance=job.distance,
                policy=label,
                value=value.mean,
                regret=oracle.mean - value.mean,
                se=value.se,
            )
        )
    return rows


def run_generalization_experiment(config: ExperimentConfig, jobs: int = 1) -> list[RegretRow]:
    """Regret of the invariant and non-invariant greedy policies on unseen environments."""
    scm = base_scm(config)
    if config.extreme_grid:
        test_envs = extreme_env_grid()
    else:
        test_envs = sample_env_params(
            config.n_test_envs, derive_seed(config.seed, 1), scale=config.test_env_scale
        )
    rows: list[RegretRow] = []
    for count in config.train_env_counts:
        train = _train_envs(scm, count)
        arm = scm.with_envs({**train, **test_envs})
        data = logged_training_data(
            arm, list(train), config.n_train, config.n_warmup, derive_seed(config.seed, 2, count)
        )
        policies: dict[str, Policy] = {
            label: greedy_policy(fit_weighted_q(data, subset))
            for label, subset in POLICY_SUBSETS.items()
        }
        job_list = [
            _RegretJob(
                scm=arm,
                env=env,
                train_envs=count,
                distance=env_distance(list(train.values()), params),
                policies=policies,
                n_mc=config.n_mc,
                seed=derive_seed(config.seed, 3, index),
            )
            for index, (env, params) in enumerate(test_envs.items())
        ]
        for chunk in parallel_map(_regret_rows, job_list, jobs):
            rows.extend(chunk)
        logger.info("generalization_arm_finished", train_envs=count, test_envs=len(test_envs))
    return rows


@dataclass(frozen=True, eq=False)
class _AcceptanceJob:
    scm: ScmConfig
    train_envs: list[str]
    n: int
    config: ExperimentConfig
    seed: int


def _acceptance_flags(job: _AcceptanceJob) -> list[bool | None]:
    """Accept/reject per subset for one repetition; None marks a failed test."""
    config = job.config
    data = logged_training_data(job.scm, job.train_envs, job.n, config.n_warmup, job.seed)
    rule = parse_m_rule(config.m_rule)
    test_seed = derive_seed(job.seed, 2)
    flags: list[bool | None] = []
    for subset in enumerate_subsets(CONTEXT_DIM):
        try:
            if config.test_mode == "per-action":
                report = test_invariance_per_action(data, subset, rule, config.alpha, test_seed)
            elif config.test_mode == "power-opt":
                report = test_invariance_opt_policy(
                    data, subset, rule, config.alpha, config.power_opt, test_seed
                )
            else:
                policy = SoftmaxParams.zeros(data.k, subset).to_policy(data.d)
                report = test_invariance_fixed_policy(
                    data, policy, subset, rule, config.alpha, test_seed
                )
        except InvariantPolicyError:
            flags.append(None)
            continue
        flags.append(report.accepted)
    return flags


def run_acceptance_experiment(config: ExperimentConfig, jobs: int = 1) -> list[AcceptanceRow]:
    """Acceptance rate per (environment count, n, subset); failed tests count as rejections."""
    scm = base_scm(config)
    subsets = enumerate_subsets(CONTEXT_DIM)
    rows: list[AcceptanceRow] = []
    for count in config.train_env_counts:
        train = list(_train_envs(scm, count))
        if count < 2:
            raise ExperimentError("Invariance testing needs at least two training environments.")
        for n in config.n_grid:
            job_list = [
                _AcceptanceJob(
                    scm=scm,
                    train_envs=train,
                    n=n,
                    config=config,
                    seed=derive_seed(config.seed, 4, count, n, rep),
                )
                for rep in range(config.repetitions)
            ]
            outcomes = parallel_map(_acceptance_flags, job_list, jobs)
            for position, subset in enumerate(subsets):
                flags = [outcome[position] for outcome in outcomes]
                rows.append(
                    AcceptanceRow(
                        subset=subset.label(),
                        n=n,
                        envs=count,
                        accept_rate=sum(flag is True for flag in flags) / len(flags),
                        reps=len(flags),
                        failures=sum(flag is None for flag in flags),
                    )
                )
            logger.info("acceptance_arm_finished", train_envs=count, n=n)
    return rows
