from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from invariant_policy.core.types import EnvDataset, SubsetMask
from invariant_policy.invariance.power import (
    PowerOptConfig,
    SoftmaxParams,
    optimize_test_policy,
    pvalue_objective_gradient,
    split_halves,
    test_invariance_opt_policy,
)
from invariant_policy.invariance.resampler import (
    SqrtRule,
    log_prob_replacement,
    relative_weights,
    resample_replacement,
)
from invariant_policy.utils.exceptions import InvarianceTestError, PowerOptimizationError
from invariant_policy.utils.seeding import derive_seed


def _logged(
    shift: float, n_per_env: int = 200, k: int = 2, constant: bool = False, seed: int = 0
) -> EnvDataset:
    rng = np.random.default_rng(seed)
    n = 2 * n_per_env
    second = np.arange(n) >= n_per_env
    rewards = np.ones(n) if constant else shift * second + 0.1 * rng.standard_normal(n)
    return EnvDataset.from_arrays(
        contexts=rng.standard_normal((n, 2)),
        actions=np.arange(n) % k,
        rewards=rewards,
        propensities=np.full(n, 1.0 / k),
        env_labels=np.where(second, "e1", "e0"),
        k=k,
    )


def test_softmax_params() -> None:
    params = SoftmaxParams.zeros(3, SubsetMask((1,)))
    policy = params.to_policy(d=2)

    assert params.theta.shape == (3, 1)
    assert policy.probabilities(np.array([[4.0, -2.0]])) == pytest.approx(np.full((1, 3), 1 / 3))
    with pytest.raises(PowerOptimizationError):
        SoftmaxParams(np.zeros((3, 2)), SubsetMask((1,)))
    with pytest.raises(PowerOptimizationError):
        SoftmaxParams(np.array([[np.nan]]), SubsetMask((0,)))


def test_single_action_has_zero_gradient() -> None:
    data = _logged(0.0, n_per_env=50, k=1)
    p_value, gradient = pvalue_objective_gradient(
        data, SoftmaxParams.zeros(1, SubsetMask((0,))), seed=4
    )

    assert 0.0 <= p_value <= 1.0
    assert gradient.shape == (1, 1)
    assert gradient == pytest.approx(np.zeros((1, 1)))


def test_gradient_is_seeded() -> None:
    data = _logged(0.5, n_per_env=100)
    params = SoftmaxParams(np.array([[0.2, -0.1], [0.0, 0.3]]), SubsetMask((0, 1)))
    first = pvalue_objective_gradient(data, params, seed=9)
    second = pvalue_objective_gradient(data, params, seed=9)

    assert first[0] == second[0]
    assert np.array_equal(first[1], second[1])


def test_zero_learning_rate_keeps_theta() -> None:
    init = np.array([[0.5], [-0.5]])
    result = optimize_test_policy(
        _logged(0.0, n_per_env=60),
        SubsetMask((0,)),
        init_theta=init,
        learning_rate=0.0,
        iterations=3,
        seed=1,
    )

    assert result.params.theta == pytest.approx(init)
    assert [row["iteration"] for row in result.trajectory] == [0, 1, 2]
    assert result.trajectory[-1]["theta_norm"] == pytest.approx(float(np.linalg.norm(init)))


def test_optimization_rejects_bad_settings() -> None:
    data = _logged(0.0, n_per_env=60)

    with pytest.raises(PowerOptimizationError):
        optimize_test_policy(data, SubsetMask((0,)), iterations=0)
    with pytest.raises(PowerOptimizationError):
        optimize_test_policy(data, SubsetMask((0,)), learning_rate=-1.0)
    with pytest.raises(ValueError):
        PowerOptConfig(iterations=0)


def test_divergence_raises_with_trajectory() -> None:
    with pytest.raises(PowerOptimizationError) as excinfo:
        optimize_test_policy(
            _logged(0.0, n_per_env=60),
            SubsetMask((0,)),
            learning_rate=1.0,
            iterations=5,
            max_theta_norm=1e-12,
            seed=2,
        )

    assert len(excinfo.value.trajectory) == 1


def test_stalled_p_value_stops_early() -> None:
    result = optimize_test_policy(
        _logged(0.0, n_per_env=60, constant=True),
        SubsetMask(),
        learning_rate=0.0,
        iterations=50,
        tolerance=1e-3,
        window=1,
    )

    assert len(result.trajectory) == 2
    assert all(row["p_value"] == 1.0 for row in result.trajectory)


def test_split_halves_partitions_each_environment() -> None:
    data = _logged(0.0, n_per_env=21)
    first, second = split_halves(data, seed=5)

    assert first.size == 22
    assert second.size == 20
    assert sorted(np.concatenate([first, second]).tolist()) == list(range(42))
    assert np.array_equal(first, split_halves(data, seed=5)[0])

    with pytest.raises(InvarianceTestError):
        split_halves(_logged(0.0, n_per_env=3), seed=0)
    assert split_halves(_logged(0.0, n_per_env=4), seed=0)[1].size == 4


def test_opt_policy_test_rejects_shifted_rewards(tmp_path: Path) -> None:
    diagnostics = tmp_path / "trajectory.csv"
    report = test_invariance_opt_policy(
        _logged(10.0),
        SubsetMask(),
        opt_config=PowerOptConfig(learning_rate=1e-3, iterations=3),
        seed=7,
        diagnostics_path=diagnostics,
    )

    assert not report.accepted
    assert report.test_policy_kind == "power-opt"
    assert report.seed == 7
    assert report.m_per_env == {"e0": 10, "e1": 10}
    trajectory = pd.read_csv(diagnostics)
    assert list(trajectory.columns) == ["iteration", "p_value", "grad_norm", "theta_norm"]
    assert len(trajectory) == 3


def test_gradient_matches_finite_differences_of_log_probability() -> None:
    data = _logged(0.0, n_per_env=40, k=3)
    subset = SubsetMask((0, 1))
    theta = np.array([[0.3, -0.2], [0.0, 0.4], [-0.1, 0.1]])
    seed = 6
    p_value, gradient = pvalue_objective_gradient(data, SoftmaxParams(theta, subset), seed=seed)
    assert p_value > 0

    def weights_at(values: np.ndarray, env: str) -> np.ndarray:
        policy = SoftmaxParams(values, subset).to_policy(data.d)
        return relative_weights(data.for_env(env), policy, subset)

    draws = {
        env: resample_replacement(
            weights_at(theta, env), SqrtRule()(data.for_env(env).n), derive_seed(seed, index)
        )
        for index, env in enumerate(data.envs)
    }

    def log_prob(values: np.ndarray) -> float:
        return sum(log_prob_replacement(draws[env], weights_at(values, env)) for env in data.envs)

    step = 1e-6
    numeric = np.zeros_like(theta)
    for position in np.ndindex(theta.shape):
        bump = np.zeros_like(theta)
        bump[position] = step
        numeric[position] = (log_prob(theta + bump) - log_prob(theta - bump)) / (2 * step)

    assert gradient / p_value == pytest.approx(numeric, rel=0.05, abs=1e-4)
