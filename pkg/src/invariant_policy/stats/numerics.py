"""Weighted least squares, Kruskal-Wallis, Brown-Forsythe, chi-square tail and Bonferroni."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
from scipy import linalg, special, stats

from invariant_policy.utils.exceptions import DataValidationError, SingularDesignError


@dataclass(frozen=True, eq=False)
class LinearModel:
    """Affine model ``f(x) = coefficients[0] + x · coefficients[1:]``."""

    coefficients: np.ndarray
    feature_dim: int

    def __post_init__(self) -> None:
        if self.coefficients.shape != (self.feature_dim + 1,):
            raise DataValidationError(
                f"Expected {self.feature_dim + 1} coefficients, got {self.coefficients.shape}."
            )

    @property
    def intercept(self) -> float:
        return float(self.coefficients[0])

    @property
    def slopes(self) -> np.ndarray:
        return self.coefficients[1:]

    def predict(self, features: np.ndarray) -> np.ndarray:
        x = _as_matrix(features)
        if x.shape[1] != self.feature_dim:
            raise DataValidationError(f"Expected {self.feature_dim} features, got {x.shape[1]}.")
        return self.coefficients[0] + x @ self.coefficients[1:]


def _as_matrix(features: np.ndarray) -> np.ndarray:
    # 1-D input is a single feature column
    x = np.asarray(features, dtype=float)
    return x.reshape(-1, 1) if x.ndim == 1 else x


def weighted_least_squares(
    features: np.ndarray,
    targets: np.ndarray,
    weights: np.ndarray | None = None,
    ridge: float = 0.0,
) -> LinearModel:
    """Minimize ``sum w_i (f(x_i) - r_i)^2 + ridge * |slopes|^2`` over affine ``f``.

    The intercept is never penalized. With ``ridge == 0`` a rank-deficient
    weighted design raises :class:`SingularDesignError`.
    """
    y = np.asarray(targets, dtype=float)
    n = y.shape[0]
    x = _as_matrix(features)
    if x.shape[0] != n:
        raise DataValidationError(f"Got {x.shape[0]} feature rows for {n} targets.")
    p = x.shape[1]
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != (n,):
        raise DataValidationError("Need exactly one weight per row.")
    if not np.all(np.isfinite(w)) or np.any(w < 0) or not np.any(w > 0):
        raise DataValidationError("Weights must be finite, non-negative and not all zero.")
    if ridge < 0:
        raise DataValidationError(f"Ridge must be non-negative, got {ridge}.")

    root_w = np.sqrt(w)
    design = np.column_stack([np.ones(n), x]) * root_w[:, None]
    response = y * root_w
    if ridge == 0.0:
        rank = int(np.linalg.matrix_rank(design[w > 0]))
        if rank < p + 1:
            raise SingularDesignError(rank=rank, required=p + 1)
    else:
        penalty = np.zeros((p, p + 1))
        penalty[:, 1:] = np.sqrt(ridge) * np.eye(p)
        design = np.vstack([design, penalty])
        response = np.concatenate([response, np.zeros(p)])
    coefficients, *_ = linalg.lstsq(design, response)
    return LinearModel(coefficients=np.asarray(coefficients, dtype=float), feature_dim=p)


def chi_square_sf(x: float, df: int) -> float:
    """Upper tail of the chi-square distribution via the regularized incomplete gamma."""
    if df < 1:
        raise DataValidationError(f"Degrees of freedom must be positive, got {df}.")
    if x < 0:
        raise DataValidationError(f"Chi-square statistic must be non-negative, got {x}.")
    return float(special.gammaincc(df / 2.0, x / 2.0))


def kruskal_wallis(groups: Sequence[Sequence[float] | np.ndarray]) -> tuple[float, float]:
    """Kruskal-Wallis H on mid-ranks with tie correction, and its chi-square p-value.

    All-identical observations give ``(0.0, 1.0)``.
    """
    if len(groups) < 2:
        raise DataValidationError("Kruskal-Wallis needs at least two groups.")
    arrays = [np.asarray(group, dtype=float).ravel() for group in groups]
    if any(array.size == 0 for array in arrays):
        raise DataValidationError("Kruskal-Wallis groups must be non-empty.")
    pooled = np.concatenate(arrays)
    total = pooled.size
    if total < 3:
        raise DataValidationError("Kruskal-Wallis needs at least three observations.")

    ranks = stats.rankdata(pooled)
    ties = stats.tiecorrect(ranks)
    if ties == 0:
        return 0.0, 1.0
    bounds = np.cumsum([0] + [array.size for array in arrays])
    rank_term = sum(
        ranks[start:stop].sum() ** 2 / (stop - start)
        for start, stop in zip(bounds[:-1], bounds[1:], strict=True)
    )
    h = (12.0 / (total * (total + 1)) * rank_term - 3.0 * (total + 1)) / ties
    h = max(float(h), 0.0)
    return h, chi_square_sf(h, len(arrays) - 1)


def brown_forsythe(groups: Sequence[Sequence[float] | np.ndarray]) -> tuple[float, float]:
    """Brown-Forsythe test for equal spread: Levene's F on deviations from group medians.

    Groups with no spread at all give ``(0.0, 1.0)``.
    """
    if len(groups) < 2:
        raise DataValidationError("Brown-Forsythe needs at least two groups.")
    arrays = [np.asarray(group, dtype=float).ravel() for group in groups]
    if any(array.size < 2 for array in arrays):
        raise DataValidationError("Brown-Forsythe groups need at least two observations each.")
    deviations = np.concatenate([np.abs(array - np.median(array)) for array in arrays])
    if np.allclose(deviations, deviations[0]):
        return 0.0, 1.0
    statistic, p_value = stats.levene(*arrays, center="median")
    if not np.isfinite(p_value):
        return 0.0, 1.0
    return float(statistic), float(p_value)


def bonferroni(p_values: Sequence[float]) -> float:
    """``min(1, k * min p)``."""
    values = [float(p) for p in p_values]
    if not values:
        raise DataValidationError("Bonferroni needs at least one p-value.")
    if any(not 0.0 <= p <= 1.0 for p in values):
        raise DataValidationError(f"p-values must lie in [0, 1]: {values}")
    return min(1.0, len(values) * min(values))
