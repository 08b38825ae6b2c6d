import numpy as np
import pytest

from invariant_policy.core.policies import (
    ConstantActionPolicy,
    GreedyPolicy,
    SoftmaxPolicy,
    TabularPolicy,
    UniformPolicy,
    policy_from_dict,
    policy_prob,
    restrict_context,
    sample_actions,
    select_action,
)
from invariant_policy.core.types import EnvDataset, LoggedRound, SubsetMask
from invariant_policy.utils.exceptions import DataValidationError, PolicyError


def _dataset() -> EnvDataset:
    return EnvDataset.from_arrays(
        contexts=np.array([[0.0, 1.0], [1.0, 0.0], [2.0, 2.0], [3.0, 1.0]]),
        actions=np.array([0, 1, 1, 0]),
        rewards=np.array([1.0, 0.0, 0.5, 2.0]),
        propensities=np.array([0.5, 0.5, 0.5, 0.5]),
        env_labels=["b", "a", "b", "a"],
        k=2,
    )


def test_subset_mask_parsing_and_bounds() -> None:
    assert SubsetMask.parse("{0,2}").indices == (0, 2)
    assert SubsetMask.parse("2, 0").indices == (0, 2)
    assert SubsetMask.parse("").indices == ()
    assert SubsetMask.parse("{}").indices == ()
    assert SubsetMask.of([1]).issubset(SubsetMask.full(2))
    assert SubsetMask((0, 1)).label(["age", "bmi"]) == "{age,bmi}"

    with pytest.raises(DataValidationError):
        SubsetMask.of([1, 1])
    with pytest.raises(DataValidationError):
        SubsetMask.parse("0,3", d=2)
    with pytest.raises(DataValidationError):
        SubsetMask.parse("x")


def test_env_dataset_orders_envs_by_first_appearance() -> None:
    data = _dataset()

    assert data.envs == ("b", "a")
    assert data.n == 4
    assert data.d == 2
    assert data.for_env("a").rewards.tolist() == [0.0, 2.0]
    assert list(data.split_by_env()) == ["b", "a"]
    with pytest.raises(DataValidationError):
        data.for_env("c")


def test_env_dataset_is_read_only() -> None:
    data = _dataset()

    with pytest.raises(ValueError):
        data.rewards[0] = 10.0


def test_env_dataset_rejects_invalid_rounds() -> None:
    with pytest.raises(DataValidationError):
        EnvDataset.from_arrays(np.zeros((1, 1)), np.array([0]), np.array([1.0]), [0.0], ["e"], 2)
    with pytest.raises(DataValidationError):
        EnvDataset.from_arrays(np.zeros((1, 1)), np.array([2]), np.array([1.0]), [0.5], ["e"], 2)
    with pytest.raises(DataValidationError):
        EnvDataset.from_arrays(
            np.zeros((1, 1)), np.array([0]), np.array([np.nan]), [0.5], ["e"], 2
        )


def test_env_dataset_from_rounds() -> None:
    rounds = [
        LoggedRound(context=(0.0,), action=0, reward=1.0, propensity=0.5, env="e1"),
        LoggedRound(context=(1.0,), action=1, reward=0.0, propensity=0.5, env="e2"),
    ]
    data = EnvDataset.from_rounds(rounds, k=2)

    assert data.rounds == rounds


def test_uniform_and_zero_softmax_agree() -> None:
    contexts = np.array([[0.3, -1.0], [2.0, 5.0]])
    softmax = SoftmaxPolicy(theta=np.zeros((3, 1)), mask=SubsetMask((1,)), d=2)

    assert UniformPolicy(k=3, d=2).probabilities(contexts) == pytest.approx(np.full((2, 3), 1 / 3))
    assert softmax.probabilities(contexts) == pytest.approx(np.full((2, 3), 1 / 3))


def test_softmax_depends_only_on_its_subset() -> None:
    policy = SoftmaxPolicy(theta=np.array([[1.0], [-1.0]]), mask=SubsetMask((1,)), d=2)
    left = policy.probabilities(np.array([[0.0, 1.0]]))
    right = policy.probabilities(np.array([[100.0, 1.0]]))

    assert left == pytest.approx(right)
    assert restrict_context([5.0, 7.0], SubsetMask((1,))).tolist() == [7.0]


def test_softmax_rejects_bad_theta() -> None:
    with pytest.raises(PolicyError):
        SoftmaxPolicy(theta=np.zeros((2, 2)), mask=SubsetMask((1,)), d=2)
    with pytest.raises(PolicyError):
        SoftmaxPolicy(theta=np.array([[np.inf]]), mask=SubsetMask((0,)), d=1)


def test_greedy_policy_breaks_ties_towards_lowest_action() -> None:
    policy = GreedyPolicy(
        coefficients=np.array([[0.0, 1.0], [0.0, -1.0], [0.0, 0.0]]),
        mask=SubsetMask((0,)),
        d=1,
    )

    assert policy.choose(np.array([[2.0], [-2.0], [0.0]])).tolist() == [0, 1, 0]
    assert policy_prob(policy, [2.0], 0) == 1.0
    with pytest.raises(PolicyError):
        policy_prob(policy, [2.0], 3)


def test_policy_dict_round_trip() -> None:
    policy = SoftmaxPolicy(
        theta=np.array([[0.5, 1.0], [0.0, -2.0]]),
        mask=SubsetMask((0, 1)),
        d=3,
        bias=np.array([0.1, 0.2]),
    )
    restored = policy_from_dict(policy.to_dict())
    contexts = np.array([[1.0, 2.0, 3.0], [-1.0, 0.0, 4.0]])

    assert isinstance(restored, SoftmaxPolicy)
    assert restored.probabilities(contexts) == pytest.approx(policy.probabilities(contexts))
    with pytest.raises(PolicyError):
        policy_from_dict({"kind": "mystery", "k": 2, "d": 1})


def test_tabular_policy_lookup() -> None:
    data = _dataset()
    table = TabularPolicy.from_policy(ConstantActionPolicy(k=2, d=2, action=1), data)

    assert table.probabilities(data.contexts)[:, 1] == pytest.approx(np.ones(4))
    with pytest.raises(PolicyError):
        table.probabilities(np.array([[9.0, 9.0]]))


def test_sampling_is_seeded_and_respects_degenerate_policies() -> None:
    contexts = np.zeros((50, 2))
    actions, probs = sample_actions(ConstantActionPolicy(k=3, d=2, action=2), contexts, seed=1)

    assert actions.tolist() == [2] * 50
    assert probs.tolist() == [1.0] * 50

    uniform = UniformPolicy(k=3, d=2)
    first, _ = sample_actions(uniform, contexts, seed=7)
    second, _ = sample_actions(uniform, contexts, seed=7)
    assert first.tolist() == second.tolist()
    assert set(first.tolist()) == {0, 1, 2}
    assert select_action(uniform, [0.0, 0.0], seed=3) == select_action(uniform, [0.0, 0.0], 3)


def test_constant_action_out_of_range() -> None:
    with pytest.raises(PolicyError):
        ConstantActionPolicy(k=2, d=1, action=2)


def test_softmax_is_translation_invariant() -> None:
    contexts = np.array([[0.3, -1.0], [2.0, 5.0], [-4.0, 0.5]])
    theta = np.array([[0.5, -1.0], [2.0, 0.0], [-0.5, 1.5]])
    shifted = theta + np.array([3.0, -2.0])
    base = SoftmaxPolicy(theta=theta, mask=SubsetMask((0, 1)), d=2)
    moved = SoftmaxPolicy(theta=shifted, mask=SubsetMask((0, 1)), d=2)

    assert moved.probabilities(contexts) == pytest.approx(base.probabilities(contexts), abs=1e-12)
