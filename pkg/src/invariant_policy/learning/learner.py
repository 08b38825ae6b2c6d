"""Learn an optimal invariant policy from multi-environment offline bandit data.

Every subset of context coordinates (by increasing size, then lexicographic)
is tested for invariance; accepted subsets are optimized off-policy and the
one with the largest cross-fitted value wins. No accepted subset means no
policy; accepted subsets that all fail to be valued raise.
"""

from __future__ import annotations

import itertools
import json
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field, field_validator

from invariant_policy.config import DEFAULTS
from invariant_policy.core.policies import Policy
from invariant_policy.core.types import EnvDataset, SubsetMask
from invariant_policy.invariance.power import (
    PowerOptConfig,
    SoftmaxParams,
    test_invariance_opt_policy,
)
from invariant_policy.invariance.resampler import MRule, parse_m_rule
from invariant_policy.invariance.target_test import (
    TestReport,
    test_invariance_fixed_policy,
    test_invariance_per_action,
)
from invariant_policy.learning.policy_opt import OffPolicyValue, off_opt
from invariant_policy.utils.exceptions import (
    DataValidationError,
    InvariantPolicyError,
    OffPolicyError,
)
from invariant_policy.utils.logger import get_logger
from invariant_policy.utils.parallel import parallel_map
from invariant_policy.utils.seeding import derive_seed

logger = get_logger("invariant_policy.learning.learner")

TestMode = Literal["fixed", "per-action", "power-opt"]
MAX_CONTEXT_DIM = 20


class LearnerConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    alpha: float = Field(default=DEFAULTS.alpha, gt=0.0, lt=1.0)
    test_mode: TestMode = "per-action"
    max_subset_size: int | None = Field(default=None, ge=0)
    value_folds: int = Field(default=DEFAULTS.folds, ge=2)
    seed: int = DEFAULTS.seed
    top_k: int = Field(default=DEFAULTS.top_k, ge=0)
    m_rule: str = DEFAULTS.m_rule
    ridge: float = Field(default=DEFAULTS.ridge, ge=0.0)
    power_opt: PowerOptConfig = PowerOptConfig()
    jobs: int = Field(default=1, ge=1)

    @field_validator("m_rule")
    @classmethod
    def _valid_m_rule(cls, value: str) -> str:
        parse_m_rule(value)
        return value

    @property
    def resample_rule(self) -> MRule:
        return parse_m_rule(self.m_rule)


@dataclass(frozen=True)
class SubsetPValue:
    subset: SubsetMask
    p_value: float
    accepted: bool


@dataclass(frozen=True, eq=False)
class SubsetOutcome:
    """Everything learned about one subset; ``error`` set means excluded."""

    rank: int
    subset: SubsetMask
    report: TestReport | None = None
    value: OffPolicyValue | None = None
    error: str | None = None

    @property
    def accepted(self) -> bool:
        return self.report is not None and self.report.accepted


@dataclass(eq=False)
class LearnResult:
    best_policy: Policy | None
    best_subset: SubsetMask | None
    best_value: float | None
    reports: list[TestReport] = field(default_factory=list)
    accepted: list[SubsetMask] = field(default_factory=list)
    values: dict[str, float] = field(default_factory=dict)
    failures: dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "best_subset": None if self.best_subset is None else list(self.best_subset.indices),
            "best_value": self.best_value,
            "best_policy": None if self.best_policy is None else self.best_policy.to_dict(),
            "accepted": [list(subset.indices) for subset in self.accepted],
            "values": self.values,
            "failures": self.failures,
            "reports": [report.model_dump(mode="json") for report in self.reports],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def enumerate_subsets(d: int, max_size: int | None = None) -> list[SubsetMask]:
    """All subsets of ``range(d)`` up to ``max_size``, by size then lexicographically."""
    if d < 0:
        raise DataValidationError(f"Context dimension must be >= 0, got {d}.")
    top = d if max_size is None else min(max_size, d)
    return [
        SubsetMask(combo)
        for size in range(top + 1)
        for combo in itertools.combinations(range(d), size)
    ]


def subset_seed(seed: int, rank: int) -> int:
    return derive_seed(seed, rank)


@dataclass(frozen=True, eq=False)
class _SubsetJob:
    data: EnvDataset
    subset: SubsetMask
    rank: int
    config: LearnerConfig
    test_policy: Policy | None
    with_value: bool


def _run_test(job: _SubsetJob, seed: int) -> TestReport:
    config = job.config
    if config.test_mode == "per-action":
        return test_invariance_per_action(
            job.data, job.subset, config.resample_rule, config.alpha, seed, config.ridge
        )
    if config.test_mode == "power-opt":
        return test_invariance_opt_policy(
            job.data,
            job.subset,
            config.resample_rule,
            config.alpha,
            config.power_opt,
            seed,
            config.ridge,
        )
    policy = job.test_policy or SoftmaxParams.zeros(job.data.k, job.subset).to_policy(job.data.d)
    return test_invariance_fixed_policy(
        job.data, policy, job.subset, config.resample_rule, config.alpha, seed, config.ridge
    )


def _evaluate_subset(job: _SubsetJob) -> SubsetOutcome:
    # Errors stay inside the outcome so nothing unpicklable crosses processes.
    seed = subset_seed(job.config.seed, job.rank)
    try:
        report = _run_test(job, seed)
    except InvariantPolicyError as exc:
        logger.warning("subset_test_failed", subset=job.subset.label(), error=str(exc))
        return SubsetOutcome(rank=job.rank, subset=job.subset, error=f"test: {exc}")
    logger.info(
        "subset_tested", subset=job.subset.label(), p_value=report.p_value, accepted=report.accepted
    )
    if not (job.with_value and report.accepted):
        return SubsetOutcome(rank=job.rank, subset=job.subset, report=report)
    try:
        value = off_opt(job.data, job.subset, job.config.value_folds, seed, job.config.ridge)
    except InvariantPolicyError as exc:
        logger.warning("subset_value_failed", subset=job.subset.label(), error=str(exc))
        return SubsetOutcome(
            rank=job.rank, subset=job.subset, report=report, error=f"off_opt: {exc}"
        )
    return SubsetOutcome(rank=job.rank, subset=job.subset, report=report, value=value)


def _check_data(data: EnvDataset, config: LearnerConfig) -> None:
    if len(data.envs) < 2:
        raise DataValidationError(f"Need at least two environments, got {len(data.envs)}.")
    if config.max_subset_size is not None and config.max_subset_size > data.d:
        raise DataValidationError(
            f"max_subset_size {config.max_subset_size} exceeds context dimension {data.d}."
        )
    if data.d > MAX_CONTEXT_DIM and config.max_subset_size is None:
        raise DataValidationError(
            f"d={data.d} needs max_subset_size to cap the subset walk (limit {MAX_CONTEXT_DIM})."
        )


def evaluate_subsets(
    data: EnvDataset,
    config: LearnerConfig,
    test_policies: Mapping[SubsetMask, Policy] | None = None,
    with_value: bool = True,
) -> list[SubsetOutcome]:
    """Test (and, when accepted, value) every subset; outcomes in subset order."""
    _check_data(data, config)
    policies = test_policies or {}
    jobs = [
        _SubsetJob(data, subset, rank, config, policies.get(subset), with_value)
        for rank, subset in enumerate(enumerate_subsets(data.d, config.max_subset_size))
    ]
    return parallel_map(_evaluate_subset, jobs, config.jobs)


def learn_invariant_policy(
    data: EnvDataset,
    config: LearnerConfig,
    test_policies: Mapping[SubsetMask, Policy] | None = None,
) -> LearnResult:
    """Best off-policy value among accepted subsets, or an empty result.

    Accepted subsets whose valuation fails are skipped in favour of the next
    best; :class:`OffPolicyError` is raised when none of them can be valued.
    """
    outcomes = evaluate_subsets(data, config, test_policies)
    result = LearnResult(best_policy=None, best_subset=None, best_value=None)
    best: SubsetOutcome | None = None
    for outcome in outcomes:
        label = outcome.subset.label()
        if outcome.error is not None:
            result.failures[label] = outcome.error
        if outcome.report is not None:
            result.reports.append(outcome.report)
        if not outcome.accepted:
            continue
        result.accepted.append(outcome.subset)
        if outcome.value is None:
            continue
        result.values[label] = outcome.value.value
        if best is None or best.value is None or outcome.value.value > best.value.value:
            best = outcome
    if best is not None and best.value is not None:
        result.best_policy = best.value.policy
        result.best_subset = best.subset
        result.best_value = best.value.value
    elif result.accepted:
        raise OffPolicyError(
            f"All {len(result.accepted)} accepted subsets failed off-policy optimization: "
            + "; ".join(f"{label}: {error}" for label, error in result.failures.items())
        )
    logger.info(
        "learner_finished",
        accepted=len(result.accepted),
        best_subset=None if result.best_subset is None else result.best_subset.label(),
        failures=len(result.failures),
    )
    return result


def accepted_sets(
    data: EnvDataset,
    config: LearnerConfig,
    top_k: int | None = None,
    test_policies: Mapping[SubsetMask, Policy] | None = None,
) -> list[SubsetPValue]:
    """Tested subsets by p-value, largest first, truncated to ``top_k``."""
    limit = config.top_k if top_k is None else top_k
    if limit < 0:
        raise DataValidationError(f"top_k must be >= 0, got {limit}.")
    outcomes = evaluate_subsets(data, config, test_policies, with_value=False)
    ranked = sorted(
        (
            SubsetPValue(outcome.subset, outcome.report.p_value, outcome.report.accepted)
            for outcome in outcomes
            if outcome.report is not None
        ),
        key=lambda item: -item.p_value,
    )
    return ranked[:limit]


def intersect_accepted(accepted: Sequence[SubsetMask]) -> SubsetMask:
    if not accepted:
        raise DataValidationError("Cannot intersect an empty list of accepted sets.")
    common = set(accepted[0].indices)
    for subset in accepted[1:]:
        common &= set(subset.indices)
    return SubsetMask.of(common)


def defining_sets(accepted: Sequence[SubsetMask], max_size: int) -> list[SubsetMask]:
    """Inclusion-minimal sets of size <= ``max_size`` hitting every accepted set."""
    if not accepted:
        raise DataValidationError("Defining sets need at least one accepted set.")
    if max_size < 1:
        raise DataValidationError(f"max_size must be >= 1, got {max_size}.")
    targets = [set(subset.indices) for subset in accepted]
    universe = sorted(set().union(*targets))
    found: list[set[int]] = []
    for size in range(1, max_size + 1):
        for combo in itertools.combinations(universe, size):
            candidate = set(combo)
            if any(previous <= candidate for previous in found):
                continue
            if all(candidate & target for target in targets):
                found.append(candidate)
    return [SubsetMask.of(item) for item in found]
