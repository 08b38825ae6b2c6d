from typing import Any

import pytest

from invariant_policy.core.policies import UniformPolicy
from invariant_policy.experiments import harness
from invariant_policy.experiments.harness import (
    ExperimentConfig,
    base_scm,
    logged_training_data,
    policy_value_true,
    regret,
    rows_to_frame,
    run_acceptance_experiment,
    run_generalization_experiment,
)
from invariant_policy.invariance.power import PowerOptConfig
from invariant_policy.simulation.scm import (
    EnvParams,
    ScmConfig,
    oracle_policy,
    sample_scm_config,
)
from invariant_policy.utils.exceptions import ExperimentError, ResamplingError


def _scm() -> ScmConfig:
    return ScmConfig(
        k=3,
        beta1=[1.0, 0.0, -1.0],
        beta2=[0.0, 1.0, 0.5],
        envs={
            "train0": EnvParams(gamma=1.0, alpha=-1.0),
            "train1": EnvParams(gamma=-1.0, alpha=1.0),
        },
    )


def test_experiment_config_validation() -> None:
    assert ExperimentConfig().n_grid == [1_000, 3_000, 9_000, 27_000]
    with pytest.raises(ValueError):
        ExperimentConfig(n_grid=[3_000, 1_000])
    with pytest.raises(ValueError):
        ExperimentConfig(train_env_counts=[])


def test_base_scm() -> None:
    sampled = base_scm(ExperimentConfig(train_env_counts=[2, 3], seed=1))

    assert len(sampled.envs) == 3
    assert base_scm(ExperimentConfig(scm=_scm(), train_env_counts=[2])) == _scm()
    with pytest.raises(ExperimentError):
        base_scm(ExperimentConfig(scm=_scm(), train_env_counts=[6]))


def test_oracle_has_zero_regret() -> None:
    scm = _scm()
    oracle = oracle_policy(scm, "train0")

    assert regret(scm, "train0", oracle, n_mc=2_000, seed=1) == 0.0
    uniform_value = policy_value_true(scm, "train0", UniformPolicy(k=3, d=2), n_mc=2_000)
    assert policy_value_true(scm, "train0", oracle, n_mc=2_000) > uniform_value


def test_logged_training_data_covers_all_environments() -> None:
    data = logged_training_data(_scm(), ["train0", "train1"], n=300, n_warmup=300, seed=0)

    assert data.n == 300
    assert data.envs == ("train0", "train1")
    assert set(data.actions.tolist()) == {0, 1, 2}
    assert data.propensities.max() <= 1.0


def test_generalization_experiment_rows() -> None:
    config = ExperimentConfig(
        scm=_scm(),
        train_env_counts=[2],
        n_train=600,
        n_warmup=300,
        n_test_envs=3,
        n_mc=2_000,
        seed=5,
    )
    frame = rows_to_frame(run_generalization_experiment(config))

    assert len(frame) == 6
    assert set(frame["policy"]) == {"invariant", "non-invariant"}
    assert list(frame.columns) == [
        "env",
        "train_envs",
        "distance",
        "policy",
        "value",
        "regret",
        "se",
    ]
    assert (frame["regret"] > -0.3).all()
    assert (frame["distance"] >= 0).all()

    again = rows_to_frame(run_generalization_experiment(config))
    assert frame.equals(again)


def test_generalization_on_extreme_grid() -> None:
    config = ExperimentConfig(
        scm=_scm(),
        train_env_counts=[2],
        n_train=400,
        n_warmup=300,
        n_mc=500,
        extreme_grid=True,
    )

    assert len(run_generalization_experiment(config)) == 50


def test_acceptance_experiment_rows() -> None:
    config = ExperimentConfig(
        scm=sample_scm_config(2, seed=3),
        train_env_counts=[2],
        n_grid=[400],
        repetitions=2,
        n_warmup=300,
        seed=1,
    )
    frame = rows_to_frame(run_acceptance_experiment(config))

    assert list(frame["subset"]) == ["{}", "{0}", "{1}", "{0,1}"]
    assert (frame["reps"] == 2).all()
    assert frame["accept_rate"].between(0.0, 1.0).all()
    assert (frame["n"] == 400).all()


def test_acceptance_needs_two_environments() -> None:
    config = ExperimentConfig(scm=_scm(), train_env_counts=[1], n_grid=[100], repetitions=1)

    with pytest.raises(ExperimentError):
        run_acceptance_experiment(config)


def _shifted_scm(confounded: bool = True) -> ScmConfig:
    return ScmConfig(
        k=3,
        beta1=[1.0, -1.0, 0.5],
        beta2=[1.5, -1.5, 1.0],
        confounded=confounded,
        envs={
            "e0": EnvParams(gamma=3.0, alpha=1.0),
            "e1": EnvParams(gamma=1.0, alpha=-1.0),
            "e2": EnvParams(gamma=0.0, alpha=0.5),
        },
    )


def test_acceptance_separates_the_invariant_subset_as_n_grows() -> None:
    config = ExperimentConfig(
        scm=_shifted_scm(),
        train_env_counts=[3],
        n_grid=[600, 27_000],
        repetitions=30,
        n_warmup=600,
        seed=2,
    )
    rate = rows_to_frame(run_acceptance_experiment(config)).set_index(["subset", "n"])[
        "accept_rate"
    ]

    assert rate[("{1}", 600)] >= 0.8
    assert rate[("{1}", 27_000)] >= 0.8
    assert rate[("{0,1}", 27_000)] <= 0.25
    assert rate[("{0,1}", 27_000)] < rate[("{0,1}", 600)]
    assert rate[("{0}", 27_000)] <= 0.25


def test_failed_tests_are_counted_per_cell(monkeypatch: pytest.MonkeyPatch) -> None:
    def exhausted(*args: Any, **kwargs: Any) -> None:
        raise ResamplingError("budget exhausted")

    monkeypatch.setattr(harness, "test_invariance_per_action", exhausted)
    config = ExperimentConfig(
        scm=_scm(),
        train_env_counts=[2],
        n_grid=[400],
        repetitions=2,
        n_warmup=300,
        test_mode="per-action",
    )
    frame = rows_to_frame(run_acceptance_experiment(config))

    assert (frame["failures"] == 2).all()
    assert (frame["accept_rate"] == 0.0).all()


def test_per_action_acceptance_runs_on_the_sampled_scm() -> None:
    config = ExperimentConfig(
        train_env_counts=[2],
        n_grid=[9_000],
        repetitions=2,
        n_warmup=600,
        test_mode="per-action",
        seed=0,
    )
    frame = rows_to_frame(run_acceptance_experiment(config))

    assert len(frame) == 4
    assert (frame["reps"] == 2).all()
    assert frame["failures"].sum() < frame["reps"].sum()


def test_invariant_policy_has_smaller_worst_case_regret() -> None:
    config = ExperimentConfig(
        scm=_shifted_scm(),
        train_env_counts=[2],
        n_train=5_000,
        n_warmup=600,
        n_test_envs=20,
        n_mc=5_000,
        seed=3,
    )
    worst = rows_to_frame(run_generalization_experiment(config)).groupby("policy")["regret"].max()

    assert worst["invariant"] < worst["non-invariant"]


def test_both_policies_are_near_optimal_without_confounding() -> None:
    config = ExperimentConfig(
        scm=_shifted_scm(confounded=False),
        train_env_counts=[2],
        n_train=20_000,
        n_warmup=600,
        n_test_envs=5,
        n_mc=20_000,
        seed=4,
    )
    frame = rows_to_frame(run_generalization_experiment(config))

    assert frame["regret"].max() <= 0.05


def test_power_optimized_test_rejects_at_least_as_often_as_fixed() -> None:
    scm = ScmConfig(
        k=3,
        beta1=[2.0, 1.0, 1.5],
        beta2=[0.5, 0.0, 1.0],
        envs={
            "e0": EnvParams(gamma=1.0, alpha=3.0),
            "e1": EnvParams(gamma=1.0, alpha=-3.0),
            "e2": EnvParams(gamma=1.0, alpha=0.0),
        },
    )
    common: dict[str, Any] = {
        "scm": scm,
        "train_env_counts": [3],
        "n_grid": [3_000],
        "repetitions": 5,
        "n_warmup": 600,
        "seed": 6,
    }
    fixed = rows_to_frame(run_acceptance_experiment(ExperimentConfig(**common)))
    tuned = rows_to_frame(
        run_acceptance_experiment(
            ExperimentConfig(
                **common, test_mode="power-opt", power_opt=PowerOptConfig(iterations=20)
            )
        )
    )

    def rejection(frame: Any) -> float:
        return 1.0 - float(frame.set_index("subset").loc["{0}", "accept_rate"])

    assert rejection(tuned) >= rejection(fixed) - 0.05
