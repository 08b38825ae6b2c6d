"""Test-policy optimization for power against non-invariance.

The test policy is a linear softmax over ``X^S``. Its parameters follow
stochastic gradient steps on the expected p-value of the residual test,
using the score-function gradient of the with-replacement resampling law.
The optimized policy is then tested on a disjoint half of the data with
distinct-tuple resampling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from invariant_policy.config import DEFAULTS
from invariant_policy.core.policies import SoftmaxPolicy, restrict_contexts
from invariant_policy.core.types import EnvDataset, SubsetMask
from invariant_policy.invariance.resampler import MRule, SqrtRule, resample_replacement
from invariant_policy.invariance.target_test import (
    TestReport,
    residual_invariance_pvalue,
    test_invariance_fixed_policy,
)
from invariant_policy.utils.exceptions import InvarianceTestError, PowerOptimizationError
from invariant_policy.utils.logger import get_logger
from invariant_policy.utils.seeding import derive_seed, make_rng

logger = get_logger("invariant_policy.invariance.power")

MIN_ROUNDS_PER_ENV = 4


@dataclass(frozen=True, eq=False)
class SoftmaxParams:
    """theta with one row per action over the coordinates in ``subset``."""

    theta: np.ndarray
    subset: SubsetMask

    def __post_init__(self) -> None:
        theta = np.asarray(self.theta, dtype=float)
        if theta.ndim != 2 or theta.shape[1] != len(self.subset):
            raise PowerOptimizationError(
                f"theta must have shape (k, {len(self.subset)}), got {theta.shape}.", []
            )
        if not np.all(np.isfinite(theta)):
            raise PowerOptimizationError("theta contains non-finite entries.", [])
        object.__setattr__(self, "theta", theta)

    @classmethod
    def zeros(cls, k: int, subset: SubsetMask) -> SoftmaxParams:
        return cls(np.zeros((k, len(subset))), subset)

    def to_policy(self, d: int) -> SoftmaxPolicy:
        return SoftmaxPolicy(theta=self.theta, mask=self.subset, d=d)


@dataclass(frozen=True, eq=False)
class PowerOptimization:
    params: SoftmaxParams
    trajectory: list[dict[str, Any]] = field(default_factory=list)


class PowerOptConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    learning_rate: float = Field(default=DEFAULTS.learning_rate, ge=0.0)
    iterations: int = Field(default=DEFAULTS.iterations, ge=1)
    max_theta_norm: float = Field(default=DEFAULTS.max_theta_norm, gt=0.0)
    tolerance: float | None = Field(default=None, gt=0.0)
    window: int = Field(default=20, ge=1)


def _score_matrix(policy: SoftmaxPolicy, data: EnvDataset) -> tuple[np.ndarray, np.ndarray]:
    """Per-round grad_theta log pi(a_i | x_i^S), shape (n, k, |S|), and pi(a_i | x_i^S)."""
    probs = policy.probabilities(data.contexts)
    onehot = np.zeros_like(probs)
    onehot[np.arange(data.n), data.actions] = 1.0
    xs = restrict_contexts(data.contexts, policy.subset)
    scores = (onehot - probs)[:, :, None] * xs[:, None, :]
    return scores, probs[np.arange(data.n), data.actions]


def pvalue_objective_gradient(
    data_half: EnvDataset,
    params: SoftmaxParams,
    m_rule: MRule = SqrtRule(),
    seed: int = DEFAULTS.seed,
    ridge: float = DEFAULTS.ridge,
) -> tuple[float, np.ndarray]:
    """One with-replacement resample per environment; its p-value and pv * grad log P."""
    if len(data_half.envs) < 2:
        raise InvarianceTestError("Power optimization needs at least two environments.")
    policy = params.to_policy(data_half.d)
    gradient = np.zeros_like(params.theta)
    resampled: list[EnvDataset] = []
    for index, env in enumerate(data_half.envs):
        part = data_half.for_env(env)
        scores, target_probs = _score_matrix(policy, part)
        weights = target_probs / part.propensities
        m = m_rule(part.n)
        indices = resample_replacement(weights, m, derive_seed(seed, index))
        resampled.append(part.take(indices))
        normalizer = np.tensordot(weights, scores, axes=1) / weights.sum()
        gradient += scores[indices].sum(axis=0) - m * normalizer
    p_value = residual_invariance_pvalue(resampled, params.subset, ridge)
    gradient = p_value * gradient
    if not np.all(np.isfinite(gradient)):
        raise PowerOptimizationError("Non-finite score-function gradient.", [])
    return p_value, gradient


def optimize_test_policy(
    data_half: EnvDataset,
    subset: SubsetMask,
    init_theta: np.ndarray | None = None,
    learning_rate: float = DEFAULTS.learning_rate,
    iterations: int = DEFAULTS.iterations,
    seed: int = DEFAULTS.seed,
    m_rule: MRule = SqrtRule(),
    max_theta_norm: float = DEFAULTS.max_theta_norm,
    tolerance: float | None = None,
    window: int = 20,
    ridge: float = DEFAULTS.ridge,
) -> PowerOptimization:
    """SGD on the sampled p-value: theta <- theta - lr * pv * grad log P."""
    if iterations < 1:
        raise PowerOptimizationError(f"Need at least one iteration, got {iterations}.", [])
    if learning_rate < 0:
        raise PowerOptimizationError(f"Learning rate must be >= 0, got {learning_rate}.", [])
    subset.check_bounds(data_half.d)
    theta = (
        np.zeros((data_half.k, len(subset)))
        if init_theta is None
        else np.array(init_theta, dtype=float).reshape(data_half.k, len(subset))
    )
    trajectory: list[dict[str, Any]] = []
    for iteration in range(iterations):
        p_value, gradient = pvalue_objective_gradient(
            data_half, SoftmaxParams(theta, subset), m_rule, derive_seed(seed, iteration), ridge
        )
        theta = theta - learning_rate * gradient
        theta_norm = float(np.linalg.norm(theta))
        trajectory.append(
            {
                "iteration": iteration,
                "p_value": p_value,
                "grad_norm": float(np.linalg.norm(gradient)),
                "theta_norm": theta_norm,
            }
        )
        if not math.isfinite(theta_norm) or theta_norm > max_theta_norm:
            logger.warning("power_opt_diverged", subset=subset.label(), iteration=iteration)
            raise PowerOptimizationError(
                f"theta norm {theta_norm:.3g} exceeded {max_theta_norm:.3g} "
                f"at iteration {iteration}.",
                trajectory,
            )
        if tolerance is not None and _stalled(trajectory, tolerance, window):
            break
    return PowerOptimization(params=SoftmaxParams(theta, subset), trajectory=trajectory)


def _stalled(trajectory: list[dict[str, Any]], tolerance: float, window: int) -> bool:
    done = len(trajectory)
    if done < 2 * window or done % window:
        return False
    recent = np.mean([row["p_value"] for row in trajectory[-window:]])
    previous = np.mean([row["p_value"] for row in trajectory[-2 * window : -window]])
    return bool(previous - recent < tolerance * max(previous, 1e-12))


def split_halves(data: EnvDataset, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Shuffle each environment, first ceil(n/2) rows to half one, the rest to half two."""
    first: list[np.ndarray] = []
    second: list[np.ndarray] = []
    for index, env in enumerate(data.envs):
        rows = data.env_indices(env)
        if rows.size < MIN_ROUNDS_PER_ENV:
            raise InvarianceTestError(
                f"Environment '{env}' has {rows.size} rounds; sample splitting needs "
                f"{MIN_ROUNDS_PER_ENV}."
            )
        shuffled = make_rng(derive_seed(seed, index)).permutation(rows)
        cut = math.ceil(rows.size / 2)
        first.append(shuffled[:cut])
        second.append(shuffled[cut:])
    return np.concatenate(first), np.concatenate(second)


def test_invariance_opt_policy(
    data: EnvDataset,
    subset: SubsetMask,
    m_rule: MRule = SqrtRule(),
    alpha: float = DEFAULTS.alpha,
    opt_config: PowerOptConfig | None = None,
    seed: int = DEFAULTS.seed,
    ridge: float = DEFAULTS.ridge,
    diagnostics_path: Path | None = None,
) -> TestReport:
    """Optimize the test policy on one half and test invariance on the other."""
    if len(data.envs) < 2:
        raise InvarianceTestError("Invariance testing needs at least two environments.")
    config = opt_config or PowerOptConfig()
    first, second = split_halves(data, derive_seed(seed, 0))
    optimized = optimize_test_policy(
        data.take(first),
        subset,
        learning_rate=config.learning_rate,
        iterations=config.iterations,
        seed=derive_seed(seed, 1),
        m_rule=m_rule,
        max_theta_norm=config.max_theta_norm,
        tolerance=config.tolerance,
        window=config.window,
        ridge=ridge,
    )
    if diagnostics_path is not None:
        from invariant_policy.reports.generator import write_trajectory_csv

        write_trajectory_csv(optimized.trajectory, diagnostics_path)
    report = test_invariance_fixed_policy(
        data.take(second),
        optimized.params.to_policy(data.d),
        subset,
        m_rule=m_rule,
        alpha=alpha,
        seed=derive_seed(seed, 2),
        ridge=ridge,
    )
    return report.model_copy(update={"test_policy_kind": "power-opt", "seed": seed})


test_invariance_opt_policy.__test__ = False  # type: ignore[attr-defined]
