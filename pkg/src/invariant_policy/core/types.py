"""Logged bandit rounds, per-environment datasets and context subsets."""

from __future__ import annotations

from collections.abc import Iterable, Iterator, Sequence
from dataclasses import dataclass, field

import numpy as np

from invariant_policy.utils.exceptions import DataValidationError

MIN_PROPENSITY = 1e-8


@dataclass(frozen=True)
class LoggedRound:
    """One logged observation (x, a, r, pi0(a|x), e)."""

    context: tuple[float, ...]
    action: int
    reward: float
    propensity: float
    env: str


@dataclass(frozen=True, order=True)
class SubsetMask:
    """Sorted, duplicate-free subset of context coordinates."""

    indices: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if any(i < 0 for i in self.indices):
            raise DataValidationError(f"Subset indices must be non-negative: {self.indices}")
        if list(self.indices) != sorted(set(self.indices)):
            raise DataValidationError(f"Subset indices must be sorted and unique: {self.indices}")

    @classmethod
    def of(cls, indices: Iterable[int], d: int | None = None) -> SubsetMask:
        """Build a mask from any iterable, sorting and checking bounds against ``d``."""
        values = [int(i) for i in indices]
        if len(values) != len(set(values)):
            raise DataValidationError(f"Duplicate subset indices: {values}")
        mask = cls(tuple(sorted(values)))
        if d is not None:
            mask.check_bounds(d)
        return mask

    @classmethod
    def full(cls, d: int) -> SubsetMask:
        return cls(tuple(range(d)))

    @classmethod
    def parse(cls, text: str, d: int | None = None) -> SubsetMask:
        """Parse ``"0,2"``, ``"{0,2}"``, ``""`` or ``"{}"``."""
        cleaned = text.strip().strip("{}").strip()
        if not cleaned:
            return cls()
        try:
            values = [int(part) for part in cleaned.split(",") if part.strip()]
        except ValueError as exc:
            raise DataValidationError(f"Cannot parse subset '{text}'.") from exc
        return cls.of(values, d)

    def check_bounds(self, d: int) -> None:
        if self.indices and self.indices[-1] >= d:
            raise DataValidationError(f"Subset {self.label()} out of bounds for d={d}.")

    def issubset(self, other: SubsetMask) -> bool:
        return set(self.indices) <= set(other.indices)

    def label(self, names: Sequence[str] | None = None) -> str:
        if names is None:
            return "{" + ",".join(str(i) for i in self.indices) + "}"
        return "{" + ",".join(names[i] for i in self.indices) + "}"

    def __len__(self) -> int:
        return len(self.indices)

    def __iter__(self) -> Iterator[int]:
        return iter(self.indices)


def _ordered_unique(labels: np.ndarray) -> tuple[str, ...]:
    seen: dict[str, None] = {}
    for label in labels:
        seen.setdefault(str(label), None)
    return tuple(seen)


@dataclass(frozen=True, eq=False)
class EnvDataset:
    """Column store of logged rounds from one or more environments.

    ``envs`` lists environment labels in order of first appearance; every
    per-environment grouping follows that order.
    """

    contexts: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    propensities: np.ndarray
    env_labels: np.ndarray
    k: int
    envs: tuple[str, ...] = field(default=())

    @classmethod
    def from_arrays(
        cls,
        contexts: np.ndarray,
        actions: np.ndarray,
        rewards: np.ndarray,
        propensities: np.ndarray,
        env_labels: Sequence[object] | np.ndarray,
        k: int,
    ) -> EnvDataset:
        """Validate and freeze raw arrays."""
        x = np.array(contexts, dtype=float)
        if x.ndim == 1:
            x = x.reshape(-1, 1)
        a = np.array(actions)
        r = np.array(rewards, dtype=float)
        p = np.array(propensities, dtype=float)
        e = np.asarray([str(label) for label in env_labels], dtype=object)
        n = x.shape[0]
        if n == 0:
            raise DataValidationError("Dataset must contain at least one round.")
        if not (a.shape == r.shape == p.shape == e.shape == (n,)):
            raise DataValidationError("Context, action, reward, propensity and env lengths differ.")
        if k < 1:
            raise DataValidationError(f"Action count must be positive, got k={k}.")
        if not np.all(np.isfinite(x)):
            raise DataValidationError("Contexts contain non-finite entries.")
        if not np.all(np.isfinite(r)):
            raise DataValidationError("Rewards contain non-finite entries.")
        if not np.all(np.equal(np.mod(a, 1), 0)):
            raise DataValidationError("Actions must be integers.")
        a = a.astype(np.int64)
        if a.min() < 0 or a.max() >= k:
            raise DataValidationError(f"Actions must lie in [0, {k}).")
        if not np.all(np.isfinite(p)) or np.any(p <= MIN_PROPENSITY) or np.any(p > 1.0 + 1e-12):
            raise DataValidationError(
                f"Propensities must lie in ({MIN_PROPENSITY}, 1]; rejecting instead of clipping."
            )
        return cls._frozen(x, a, r, np.minimum(p, 1.0), e, k)

    @classmethod
    def from_rounds(cls, rounds: Sequence[LoggedRound], k: int) -> EnvDataset:
        if not rounds:
            raise DataValidationError("Dataset must contain at least one round.")
        widths = {len(item.context) for item in rounds}
        if len(widths) != 1:
            raise DataValidationError(f"Rounds disagree on context dimension: {sorted(widths)}")
        return cls.from_arrays(
            contexts=np.array([item.context for item in rounds], dtype=float).reshape(
                len(rounds), widths.pop()
            ),
            actions=np.array([item.action for item in rounds]),
            rewards=np.array([item.reward for item in rounds], dtype=float),
            propensities=np.array([item.propensity for item in rounds], dtype=float),
            env_labels=[item.env for item in rounds],
            k=k,
        )

    @classmethod
    def _frozen(
        cls,
        contexts: np.ndarray,
        actions: np.ndarray,
        rewards: np.ndarray,
        propensities: np.ndarray,
        env_labels: np.ndarray,
        k: int,
    ) -> EnvDataset:
        for array in (contexts, actions, rewards, propensities, env_labels):
            array.setflags(write=False)
        envs = _ordered_unique(env_labels)
        return cls(contexts, actions, rewards, propensities, env_labels, k, envs)

    @classmethod
    def concat(cls, parts: Sequence[EnvDataset]) -> EnvDataset:
        if not parts:
            raise DataValidationError("Nothing to concatenate.")
        if len({(part.d, part.k) for part in parts}) != 1:
            raise DataValidationError("Datasets disagree on context dimension or action count.")
        return cls._frozen(
            np.concatenate([part.contexts for part in parts]),
            np.concatenate([part.actions for part in parts]),
            np.concatenate([part.rewards for part in parts]),
            np.concatenate([part.propensities for part in parts]),
            np.concatenate([part.env_labels for part in parts]),
            parts[0].k,
        )

    @property
    def n(self) -> int:
        return int(self.contexts.shape[0])

    @property
    def d(self) -> int:
        return int(self.contexts.shape[1])

    @property
    def rounds(self) -> list[LoggedRound]:
        return [
            LoggedRound(
                context=tuple(float(v) for v in self.contexts[i]),
                action=int(self.actions[i]),
                reward=float(self.rewards[i]),
                propensity=float(self.propensities[i]),
                env=str(self.env_labels[i]),
            )
            for i in range(self.n)
        ]

    def take(self, indices: Sequence[int] | np.ndarray) -> EnvDataset:
        """Rows at ``indices`` (repeats allowed) as a new dataset."""
        idx = np.asarray(indices, dtype=np.int64)
        if idx.size == 0:
            raise DataValidationError("Cannot take an empty selection.")
        return self._frozen(
            self.contexts[idx],
            self.actions[idx],
            self.rewards[idx],
            self.propensities[idx],
            self.env_labels[idx],
            self.k,
        )

    def env_indices(self, env: str) -> np.ndarray:
        return np.flatnonzero(self.env_labels == str(env))

    def for_env(self, env: str) -> EnvDataset:
        idx = self.env_indices(env)
        if idx.size == 0:
            raise DataValidationError(f"Environment '{env}' not present in dataset.")
        return self.take(idx)

    def split_by_env(self) -> dict[str, EnvDataset]:
        return {env: self.for_env(env) for env in self.envs}

