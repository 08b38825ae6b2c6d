"""Multi-environment linear/Gaussian SCM for contextual bandit data.

    U  := eps_U
    X1 := gamma_e U + eps_X1          (confounded wiring)
    X1 := gamma_e V + eps_X1          (unconfounded wiring, V an independent copy of U)
    X2 := alpha_e + eps_X2
    A  ~ pi(. | X1, X2)
    R  := beta1[A] X2 + beta2[A] U + eps_R

Contexts are ordered ``(X1, X2)``, i.e. coordinate 0 is X1 and 1 is X2.
"""

from __future__ import annotations

import json
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from invariant_policy.config import DEFAULTS
from invariant_policy.core.policies import GreedyPolicy, Policy, SoftmaxPolicy, sample_actions
from invariant_policy.core.types import EnvDataset, SubsetMask
from invariant_policy.stats.numerics import weighted_least_squares
from invariant_policy.utils.exceptions import DataValidationError, ExperimentError
from invariant_policy.utils.seeding import SeedLike, derive_seed, make_rng

CONTEXT_DIM = 2
X1, X2 = 0, 1


class NoiseStd(BaseModel):
    model_config = ConfigDict(frozen=True)

    u: float = Field(default=1.0, ge=0.0)
    x1: float = Field(default=1.0, ge=0.0)
    x2: float = Field(default=1.0, ge=0.0)
    r: float = Field(default=1.0, ge=0.0)


class ScmParams(BaseModel):
    """Reward coefficients shared by every environment."""

    model_config = ConfigDict(frozen=True)

    k: int = Field(ge=1)
    beta1: list[float]
    beta2: list[float]
    confounded: bool = True

    @model_validator(mode="after")
    def _check_lengths(self) -> ScmParams:
        if len(self.beta1) != self.k or len(self.beta2) != self.k:
            raise ValueError(f"beta1 and beta2 must both have length k={self.k}.")
        return self


class EnvParams(BaseModel):
    model_config = ConfigDict(frozen=True)

    gamma: float = Field(allow_inf_nan=False)
    alpha: float = Field(allow_inf_nan=False)


class ScmConfig(BaseModel):
    """SCM parameters plus the per-environment shifts; serialized flat as JSON."""

    model_config = ConfigDict(frozen=True)

    k: int = Field(default=DEFAULTS.k_actions, ge=1)
    beta1: list[float]
    beta2: list[float]
    confounded: bool = True
    envs: dict[str, EnvParams]
    noise_std: NoiseStd = NoiseStd()

    @field_validator("envs")
    @classmethod
    def _non_empty(cls, value: dict[str, EnvParams]) -> dict[str, EnvParams]:
        if not value:
            raise ValueError("ScmConfig needs at least one environment.")
        return value

    @model_validator(mode="after")
    def _check_lengths(self) -> ScmConfig:
        if len(self.beta1) != self.k or len(self.beta2) != self.k:
            raise ValueError(f"beta1 and beta2 must both have length k={self.k}.")
        return self

    @property
    def scm(self) -> ScmParams:
        return ScmParams(k=self.k, beta1=self.beta1, beta2=self.beta2, confounded=self.confounded)

    def env(self, env: str) -> EnvParams:
        try:
            return self.envs[env]
        except KeyError:
            raise DataValidationError(
                f"Unknown environment '{env}'; known: {sorted(self.envs)}"
            ) from None

    def with_envs(self, envs: Mapping[str, EnvParams]) -> ScmConfig:
        return self.model_copy(update={"envs": dict(envs)})

    @classmethod
    def from_json_file(cls, path: Path) -> ScmConfig:
        try:
            return cls.model_validate_json(path.read_text(encoding="utf-8"))
        except ValueError as exc:
            raise DataValidationError(f"Invalid SCM config {path}: {exc}") from exc

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True)


@dataclass(frozen=True)
class MonteCarloValue:
    mean: float
    se: float
    n: int


def _draw_contexts(
    config: ScmConfig, env: str, n: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    params = config.env(env)
    noise = config.noise_std
    u = noise.u * rng.standard_normal(n)
    twin = noise.u * rng.standard_normal(n)
    driver = u if config.confounded else twin
    x1 = params.gamma * driver + noise.x1 * rng.standard_normal(n)
    x2 = params.alpha + noise.x2 * rng.standard_normal(n)
    return u, np.column_stack([x1, x2])


def _check_policy(config: ScmConfig, policy: Policy) -> None:
    if policy.d != CONTEXT_DIM or policy.k != config.k:
        raise DataValidationError(
            f"Policy must act on d={CONTEXT_DIM}, k={config.k}; got d={policy.d}, k={policy.k}."
        )


def sample_rounds(
    config: ScmConfig, env: str, policy: Policy, n: int, seed: SeedLike
) -> EnvDataset:
    """Draw ``n`` logged rounds from environment ``env`` under ``policy``."""
    if n < 1:
        raise DataValidationError(f"Need n >= 1 rounds, got {n}.")
    _check_policy(config, policy)
    rng = make_rng(seed)
    u, contexts = _draw_contexts(config, env, n, rng)
    actions, propensities = sample_actions(policy, contexts, rng)
    beta1, beta2 = np.asarray(config.beta1), np.asarray(config.beta2)
    rewards = (
        beta1[actions] * contexts[:, X2]
        + beta2[actions] * u
        + config.noise_std.r * rng.standard_normal(n)
    )
    return EnvDataset.from_arrays(contexts, actions, rewards, propensities, [env] * n, config.k)


def sample_pooled(
    config: ScmConfig, envs: Sequence[str], policy: Policy, n_total: int, seed: int
) -> EnvDataset:
    """Split ``n_total`` rounds evenly over ``envs`` (remainder to the first ones)."""
    if not envs:
        raise ExperimentError("Need at least one environment to sample from.")
    base, extra = divmod(n_total, len(envs))
    parts = [
        sample_rounds(config, env, policy, base + (1 if i < extra else 0), derive_seed(seed, i))
        for i, env in enumerate(envs)
        if base + (1 if i < extra else 0) > 0
    ]
    return EnvDataset.concat(parts)


def make_initial_policy(warmup_data: EnvDataset, scale: float = 0.5) -> SoftmaxPolicy:
    """pi0(a|x) ∝ exp(scale * f_a(x)) with f_a the per-action linear reward fit."""
    d = warmup_data.d
    intercepts = np.zeros(warmup_data.k)
    slopes = np.zeros((warmup_data.k, d))
    for action in range(warmup_data.k):
        rows = warmup_data.actions == action
        if rows.sum() < d + 2:
            raise DataValidationError(
                f"Action {action} observed {int(rows.sum())} times; need at least {d + 2}."
            )
        model = weighted_least_squares(warmup_data.contexts[rows], warmup_data.rewards[rows])
        intercepts[action] = model.intercept
        slopes[action] = model.slopes
    return SoftmaxPolicy(
        theta=scale * slopes, mask=SubsetMask.full(d), d=d, bias=scale * intercepts
    )


def confounder_slope(config: ScmConfig, env: str) -> float:
    """c_e with E[U | X1 = x1] = c_e * x1 (zero when X1 carries no information on U)."""
    params = config.env(env)
    if not config.confounded:
        return 0.0
    var_u = config.noise_std.u**2
    denominator = params.gamma**2 * var_u + config.noise_std.x1**2
    return 0.0 if denominator == 0 else params.gamma * var_u / denominator


def oracle_policy(config: ScmConfig, env: str) -> GreedyPolicy:
    """Greedy in ``beta1[a] x2 + beta2[a] E[U | x1]``, the per-environment optimum."""
    slope = confounder_slope(config, env)
    coefficients = np.column_stack(
        [np.zeros(config.k), slope * np.asarray(config.beta2), np.asarray(config.beta1)]
    )
    return GreedyPolicy(coefficients=coefficients, mask=SubsetMask.full(CONTEXT_DIM), d=CONTEXT_DIM)


def monte_carlo_value(
    config: ScmConfig, env: str, policy: Policy, n_mc: int, seed: SeedLike
) -> MonteCarloValue:
    """Expected reward of ``policy`` in ``env`` from ``n_mc`` fresh context draws.

    Action choice and reward noise are integrated out per round; the same seed
    reuses the same (U, X) draws for every policy.
    """
    _check_policy(config, policy)
    rng = make_rng(seed)
    u, contexts = _draw_contexts(config, env, n_mc, rng)
    means = np.outer(contexts[:, X2], config.beta1) + np.outer(u, config.beta2)
    per_round = (policy.probabilities(contexts) * means).sum(axis=1)
    se = float(per_round.std(ddof=1) / np.sqrt(n_mc)) if n_mc > 1 else float("nan")
    return MonteCarloValue(mean=float(per_round.mean()), se=se, n=n_mc)


def oracle_value(config: ScmConfig, env: str, n_mc: int, seed: SeedLike) -> float:
    return monte_carlo_value(config, env, oracle_policy(config, env), n_mc, seed).mean


def env_distance(train_envs: Sequence[EnvParams], test_env: EnvParams) -> float:
    """l2 distance between the mean training (gamma, alpha) and the test pair."""
    if not train_envs:
        raise DataValidationError("Need at least one training environment.")
    centre = np.mean([[item.gamma, item.alpha] for item in train_envs], axis=0)
    return float(np.linalg.norm(centre - np.array([test_env.gamma, test_env.alpha])))


def sample_env_params(
    n: int, seed: SeedLike, prefix: str = "test", scale: float = 2.0
) -> dict[str, EnvParams]:
    """(gamma, alpha) ~ N(0, scale^2) independently per environment."""
    rng = make_rng(seed)
    draws = rng.normal(0.0, scale, size=(n, 2))
    return {f"{prefix}{i}": EnvParams(gamma=g, alpha=a) for i, (g, a) in enumerate(draws)}


def extreme_env_grid(
    bound: float = 6.0, steps: int = 5, prefix: str = "grid"
) -> dict[str, EnvParams]:
    """Regular (gamma, alpha) grid on [-bound, bound]^2."""
    values = np.linspace(-bound, bound, steps)
    return {
        f"{prefix}{i}": EnvParams(gamma=float(g), alpha=float(a))
        for i, (g, a) in enumerate((g, a) for g in values for a in values)
    }


def sample_scm_config(
    n_envs: int,
    seed: SeedLike,
    k: int = DEFAULTS.k_actions,
    confounded: bool = True,
    prefix: str = "train",
) -> ScmConfig:
    """beta entries ~ N(0, 1); environment shifts ~ N(0, 4); frozen per seed."""
    if n_envs < 1:
        raise DataValidationError("Need at least one environment.")
    rng = make_rng(seed)
    beta1 = rng.standard_normal(k).tolist()
    beta2 = rng.standard_normal(k).tolist()
    envs = sample_env_params(n_envs, rng, prefix=prefix)
    return ScmConfig(k=k, beta1=beta1, beta2=beta2, confounded=confounded, envs=envs)
