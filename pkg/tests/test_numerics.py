import math

import numpy as np
import pytest

from invariant_policy.stats.numerics import (
    bonferroni,
    brown_forsythe,
    chi_square_sf,
    kruskal_wallis,
    weighted_least_squares,
)
from invariant_policy.utils.exceptions import DataValidationError, SingularDesignError


def test_weighted_least_squares_recovers_exact_line() -> None:
    x = np.array([0.0, 1.0, 2.0, 3.0])
    model = weighted_least_squares(x, 1.0 + 2.0 * x)

    assert model.intercept == pytest.approx(1.0)
    assert model.slopes == pytest.approx([2.0])
    assert model.predict(np.array([10.0])) == pytest.approx([21.0])


def test_weighted_least_squares_ignores_zero_weight_rows() -> None:
    x = np.array([0.0, 1.0, 2.0, 3.0, 4.0])
    y = np.array([0.0, 1.0, 2.0, 3.0, 100.0])
    model = weighted_least_squares(x, y, weights=np.array([1.0, 1.0, 1.0, 1.0, 0.0]))

    assert model.coefficients == pytest.approx([0.0, 1.0], abs=1e-9)


def test_weighted_least_squares_intercept_only_for_empty_features() -> None:
    model = weighted_least_squares(np.zeros((3, 0)), np.array([1.0, 2.0, 6.0]))

    assert model.feature_dim == 0
    assert model.intercept == pytest.approx(3.0)


def test_weighted_least_squares_rank_deficiency() -> None:
    x = np.ones(4)
    y = np.array([1.0, 2.0, 3.0, 4.0])

    with pytest.raises(SingularDesignError) as excinfo:
        weighted_least_squares(x, y)
    assert excinfo.value.rank == 1
    assert excinfo.value.required == 2

    regularized = weighted_least_squares(x, y, ridge=1e-6)
    assert np.all(np.isfinite(regularized.coefficients))


def test_weighted_least_squares_rejects_bad_weights() -> None:
    with pytest.raises(DataValidationError):
        weighted_least_squares(np.arange(3.0), np.arange(3.0), weights=np.array([1.0, -1.0, 1.0]))
    with pytest.raises(DataValidationError):
        weighted_least_squares(np.arange(3.0), np.arange(3.0), weights=np.zeros(3))


def test_chi_square_sf_two_degrees_of_freedom_is_exponential() -> None:
    assert chi_square_sf(0.0, 2) == pytest.approx(1.0)
    assert chi_square_sf(4.0, 2) == pytest.approx(math.exp(-2.0))


def test_kruskal_wallis_worked_example() -> None:
    h, p = kruskal_wallis([[1, 2, 3], [4, 5, 6], [7, 8, 9]])

    assert h == pytest.approx(7.2)
    assert p == pytest.approx(math.exp(-3.6))


def test_kruskal_wallis_all_identical_observations() -> None:
    assert kruskal_wallis([[2.0, 2.0], [2.0, 2.0, 2.0]]) == (0.0, 1.0)


def test_kruskal_wallis_tie_correction_matches_scipy() -> None:
    from scipy import stats

    groups = [[1.0, 2.0, 2.0, 3.0], [2.0, 4.0, 4.0], [5.0, 5.0, 6.0]]
    h, p = kruskal_wallis(groups)
    expected = stats.kruskal(*groups)

    assert h == pytest.approx(expected.statistic)
    assert p == pytest.approx(expected.pvalue)


def test_kruskal_wallis_needs_two_groups() -> None:
    with pytest.raises(DataValidationError):
        kruskal_wallis([[1.0, 2.0, 3.0]])
    with pytest.raises(DataValidationError):
        kruskal_wallis([[1.0], []])


def test_bonferroni() -> None:
    assert bonferroni([0.01, 0.2, 0.5]) == pytest.approx(0.03)
    assert bonferroni([0.5, 0.6]) == 1.0
    with pytest.raises(DataValidationError):
        bonferroni([])
    with pytest.raises(DataValidationError):
        bonferroni([1.5])


def test_kruskal_wallis_level_under_identical_groups() -> None:
    rng = np.random.default_rng(11)
    p_values = [
        kruskal_wallis([rng.standard_normal(20) for _ in range(3)])[1] for _ in range(2_000)
    ]

    assert 0.03 <= np.mean(np.asarray(p_values) < 0.05) <= 0.07


def test_brown_forsythe_matches_scipy_median_levene() -> None:
    from scipy import stats

    groups = [[1.0, 2.0, 4.0, 7.0], [2.0, 2.5, 3.0], [0.0, 5.0, 10.0, 12.0]]
    statistic, p = brown_forsythe(groups)
    expected = stats.levene(*groups, center="median")

    assert statistic == pytest.approx(expected.statistic)
    assert p == pytest.approx(expected.pvalue)


def test_brown_forsythe_detects_spread_not_location() -> None:
    rng = np.random.default_rng(4)
    base = rng.standard_normal(200)

    assert brown_forsythe([base, 5.0 + rng.standard_normal(200)])[1] > 0.01
    assert brown_forsythe([base, 4.0 * rng.standard_normal(200)])[1] < 1e-6


def test_brown_forsythe_degenerate_groups() -> None:
    assert brown_forsythe([[1.0, 1.0], [3.0, 3.0, 3.0]]) == (0.0, 1.0)
    with pytest.raises(DataValidationError):
        brown_forsythe([[1.0, 2.0]])
    with pytest.raises(DataValidationError):
        brown_forsythe([[1.0, 2.0], [3.0]])
