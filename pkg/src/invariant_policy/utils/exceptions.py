"""Domain-specific exceptions."""

from __future__ import annotations

from typing import Any


class InvariantPolicyError(Exception):
    """Base exception for the invariant-policy package."""


class DataValidationError(InvariantPolicyError):
    """Raised when inbound data fails validation checks."""


class PolicyError(InvariantPolicyError):
    """Raised when a policy is evaluated outside its domain or is corrupted."""


class SingularDesignError(InvariantPolicyError):
    """Raised when a least-squares design matrix is rank deficient."""

    def __init__(self, rank: int, required: int):
        super().__init__(
            f"Design matrix has rank {rank}, {required} required; pass ridge > 0 to regularize."
        )
        self.rank = rank
        self.required = required


class ResamplingError(InvariantPolicyError):
    """Raised when a weighted resample cannot be drawn."""


class InvarianceTestError(InvariantPolicyError):
    """Raised when an invariance test precondition does not hold."""


class PowerOptimizationError(InvariantPolicyError):
    """Raised when test-policy optimization diverges."""

    def __init__(self, message: str, trajectory: list[dict[str, Any]]):
        super().__init__(message)
        self.trajectory = trajectory


class OffPolicyError(InvariantPolicyError):
    """Raised when off-policy value estimation is undefined."""

    def __init__(self, message: str, fold: int | None = None):
        super().__init__(message)
        self.fold = fold


class ExperimentError(InvariantPolicyError):
    """Raised when an experiment configuration cannot be run."""


class ReportGenerationError(InvariantPolicyError):
    """Raised when output rendering or writing fails."""
