"""Off-policy optimization within Pi^S.

Per-action importance-weighted linear regression of the reward on ``X^S``
gives a Q-function; the greedy policy over it is the candidate, and its value
is estimated by cross-fitted self-normalized importance sampling.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np
from sklearn.model_selection import KFold

from invariant_policy.config import DEFAULTS
from invariant_policy.core.policies import GreedyPolicy, restrict_contexts
from invariant_policy.core.types import EnvDataset, SubsetMask
from invariant_policy.stats.numerics import LinearModel, weighted_least_squares
from invariant_policy.utils.exceptions import OffPolicyError


@dataclass(frozen=True, eq=False)
class QFunction:
    """One affine reward model per action over ``X^S``."""

    models: tuple[LinearModel, ...]
    subset: SubsetMask
    k: int
    d: int

    def __post_init__(self) -> None:
        if len(self.models) != self.k:
            raise OffPolicyError(f"Expected {self.k} action models, got {len(self.models)}.")
        if any(model.feature_dim != len(self.subset) for model in self.models):
            raise OffPolicyError(f"Every action model must use {len(self.subset)} features.")

    @property
    def coefficients(self) -> np.ndarray:
        """Shape ``(k, |S| + 1)``, intercept first."""
        return np.vstack([model.coefficients for model in self.models])

    def predict(self, contexts: np.ndarray) -> np.ndarray:
        """q(x, a) for every row and action, shape ``(n, k)``."""
        xs = restrict_contexts(np.atleast_2d(np.asarray(contexts, dtype=float)), self.subset)
        return np.column_stack([model.predict(xs) for model in self.models])

    def to_dict(self) -> dict[str, Any]:
        return {
            "k": self.k,
            "d": self.d,
            "subset": list(self.subset.indices),
            "coefficients": self.coefficients.tolist(),
        }


@dataclass(frozen=True, eq=False)
class OffPolicyValue:
    policy: GreedyPolicy
    value: float
    fold_values: tuple[float, ...]


def fit_weighted_q(
    data: EnvDataset, subset: SubsetMask, ridge: float = DEFAULTS.ridge
) -> QFunction:
    """Per-action least squares on ``X^S`` with weights ``1 / propensity``."""
    subset.check_bounds(data.d)
    xs = restrict_contexts(data.contexts, subset)
    models: list[LinearModel] = []
    for action in range(data.k):
        rows = data.actions == action
        if not rows.any():
            raise OffPolicyError(f"Action {action} never logged; cannot fit its reward model.")
        models.append(
            weighted_least_squares(
                xs[rows], data.rewards[rows], weights=1.0 / data.propensities[rows], ridge=ridge
            )
        )
    return QFunction(models=tuple(models), subset=subset, k=data.k, d=data.d)


def greedy_policy(q: QFunction) -> GreedyPolicy:
    return GreedyPolicy(coefficients=q.coefficients, mask=q.subset, d=q.d)


def snips_value(policy: GreedyPolicy, data: EnvDataset) -> float | None:
    """Self-normalized IPS value of a deterministic policy; None without matches."""
    matched = policy.choose(data.contexts) == data.actions
    weights = matched / data.propensities
    total = float(weights.sum())
    if total <= 0:
        return None
    return float(weights @ data.rewards / total)


def off_opt(
    data: EnvDataset,
    subset: SubsetMask,
    folds: int = DEFAULTS.folds,
    seed: int = DEFAULTS.seed,
    ridge: float = DEFAULTS.ridge,
) -> OffPolicyValue:
    """Greedy policy fitted on all data, valued by ``folds``-fold cross-fitting."""
    if folds < 2:
        raise OffPolicyError(f"Cross-fitting needs at least 2 folds, got {folds}.")
    required = folds * data.k * (len(subset) + 2)
    if data.n < required:
        raise OffPolicyError(
            f"{data.n} rounds are too few for {folds}-fold fitting on {subset.label()}; "
            f"need {required}."
        )
    splitter = KFold(n_splits=folds, shuffle=True, random_state=seed % 2**32)
    fold_values: list[float] = []
    for fold, (train_idx, test_idx) in enumerate(splitter.split(data.contexts)):
        try:
            policy = greedy_policy(fit_weighted_q(data.take(train_idx), subset, ridge))
        except OffPolicyError as exc:
            raise OffPolicyError(str(exc), fold=fold) from exc
        value = snips_value(policy, data.take(test_idx))
        if value is None:
            raise OffPolicyError(
                f"No held-out round in fold {fold} matches the fitted policy.", fold=fold
            )
        fold_values.append(value)
    return OffPolicyValue(
        policy=greedy_policy(fit_weighted_q(data, subset, ridge)),
        value=float(np.mean(fold_values)),
        fold_values=tuple(fold_values),
    )
