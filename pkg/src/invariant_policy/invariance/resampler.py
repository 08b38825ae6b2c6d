"""Weighted resampling of logged data towards a target policy.

Two schemes are offered. ``distinct`` draws an ordered tuple of distinct
indices with probability proportional to the product of their relative
weights; it is the scheme the level guarantee of the invariance test rests on.
``replacement`` draws i.i.d. indices proportional to the weights; its tuple
log-probability has a closed form and is used by power optimization.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass
from typing import Literal

import numpy as np
from scipy import optimize, special

from invariant_policy.config import DEFAULTS
from invariant_policy.core.policies import Policy
from invariant_policy.core.types import EnvDataset, SubsetMask
from invariant_policy.utils.exceptions import DataValidationError, PolicyError, ResamplingError
from invariant_policy.utils.seeding import SeedLike, make_rng

ResampleMode = Literal["distinct", "replacement"]

_DRAW_BATCH = 50


@dataclass(frozen=True)
class SqrtRule:
    """m = floor(sqrt(n)), at least 1."""

    def __call__(self, n: int) -> int:
        return max(1, math.isqrt(int(n)))


@dataclass(frozen=True)
class FixedRule:
    """m as given, capped at the environment size."""

    m: int

    def __call__(self, n: int) -> int:
        return max(1, min(self.m, int(n)))


MRule = SqrtRule | FixedRule


def parse_m_rule(text: str) -> MRule:
    """``"sqrt"`` or a positive integer."""
    if text.strip().lower() == "sqrt":
        return SqrtRule()
    try:
        m = int(text)
    except ValueError as exc:
        raise DataValidationError(f"m rule must be 'sqrt' or an integer, got '{text}'.") from exc
    if m < 1:
        raise DataValidationError(f"Fixed resample size must be >= 1, got {m}.")
    return FixedRule(m)


def relative_weights(data: EnvDataset, target: Policy, subset: SubsetMask) -> np.ndarray:
    """r_i = target(a_i | x_i^S) / pi0(a_i | x_i)."""
    if not target.subset.issubset(subset):
        raise PolicyError(
            f"Target policy depends on {target.subset.label()}, outside {subset.label()}."
        )
    if np.any(data.propensities <= 0) or not np.all(np.isfinite(data.propensities)):
        raise DataValidationError("Relative weights need finite, positive propensities.")
    probs = target.probabilities(data.contexts)
    return probs[np.arange(data.n), data.actions] / data.propensities


def _normalized(weights: np.ndarray) -> np.ndarray:
    w = np.asarray(weights, dtype=float)
    if w.ndim != 1 or w.size == 0:
        raise ResamplingError("Weights must be a non-empty vector.")
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise ResamplingError("Weights must be finite and non-negative.")
    total = w.sum()
    if total <= 0:
        raise ResamplingError("All resampling weights are zero.")
    return w / total


def resample_replacement(weights: np.ndarray, m: int, seed: SeedLike) -> np.ndarray:
    """m i.i.d. indices, categorical proportional to ``weights``."""
    if m < 1:
        raise ResamplingError(f"Resample size must be >= 1, got {m}.")
    probs = _normalized(weights)
    return make_rng(seed).choice(probs.size, size=m, replace=True, p=probs)


def _inclusion_log_odds(log_weights: np.ndarray, m: int) -> np.ndarray:
    """Shift log r_i by log(lambda) so that sum_i expit(log r_i + log lambda) = m."""

    def excess(shift: float) -> float:
        return float(special.expit(log_weights + shift).sum()) - m

    low, high = -1.0, 1.0
    while excess(low) > 0:
        low *= 2.0
    while excess(high) < 0:
        high *= 2.0
    shift = optimize.brentq(excess, low, high, xtol=1e-10)
    return log_weights + shift


def resample_distinct(
    weights: np.ndarray,
    m: int,
    seed: SeedLike,
    max_attempts: int = DEFAULTS.rejection_budget,
) -> np.ndarray:
    """Ordered tuple of m distinct indices with P ∝ prod of their weights.

    Conditional Poisson sampling: every positive-weight round is included
    independently with odds lambda * r_i, where lambda makes the expected
    size m; a draw of exactly m rounds is accepted and put in random order.
    """
    if m < 1:
        raise ResamplingError(f"Resample size must be >= 1, got {m}.")
    probs = _normalized(weights)
    candidates = np.flatnonzero(probs > 0)
    if candidates.size < m:
        raise ResamplingError(
            f"Only {candidates.size} rounds have positive weight; cannot draw {m}."
        )
    rng = make_rng(seed)
    if candidates.size == m:
        return rng.permutation(candidates)
    inclusion = special.expit(_inclusion_log_odds(np.log(probs[candidates]), m))
    attempts = 0
    while attempts < max_attempts:
        batch = min(_DRAW_BATCH, max_attempts - attempts)
        draws = rng.random((batch, candidates.size)) < inclusion
        hits = np.flatnonzero(draws.sum(axis=1) == m)
        if hits.size:
            return rng.permutation(candidates[draws[hits[0]]])
        attempts += batch
    raise ResamplingError(
        f"No resample of exactly {m} distinct rounds after {max_attempts} attempts."
    )


def log_prob_replacement(indices: Sequence[int] | np.ndarray, weights: np.ndarray) -> float:
    """log P(indices) under with-replacement sampling: sum log r_i - m log sum r."""
    w = np.asarray(weights, dtype=float)
    idx = np.asarray(indices, dtype=np.int64)
    picked = w[idx]
    if np.any(picked <= 0):
        raise ResamplingError("An indexed round has zero weight.")
    return float(np.log(picked).sum() - idx.size * math.log(w.sum()))


@dataclass(frozen=True, eq=False)
class ResamplePlan:
    """Resample size, relative weights and scheme for one environment."""

    m: int
    weights: np.ndarray
    mode: ResampleMode = "distinct"

    def __post_init__(self) -> None:
        if self.m < 1:
            raise ResamplingError(f"Resample size must be >= 1, got {self.m}.")
        _normalized(self.weights)

    def draw(self, seed: SeedLike) -> np.ndarray:
        if self.mode == "distinct":
            return resample_distinct(self.weights, self.m, seed)
        return resample_replacement(self.weights, self.m, seed)
