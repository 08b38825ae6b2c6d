"""Policy abstraction: maps contexts to probability vectors over a finite action set."""

from __future__ import annotations

from abc import ABC, abstractmethod
from collections.abc import Mapping
from dataclasses import dataclass, field
from typing import Any, ClassVar

import numpy as np

from invariant_policy.core.types import EnvDataset, SubsetMask
from invariant_policy.utils.exceptions import PolicyError
from invariant_policy.utils.seeding import SeedLike, make_rng

SUM_TOLERANCE = 1e-9


def restrict_context(context: np.ndarray | list[float], subset: SubsetMask) -> np.ndarray:
    """Coordinates of ``context`` at ``subset`` indices, in subset order."""
    x = np.asarray(context, dtype=float)
    subset.check_bounds(x.shape[-1])
    return x[..., list(subset.indices)]


def restrict_contexts(contexts: np.ndarray, subset: SubsetMask) -> np.ndarray:
    """Row-wise :func:`restrict_context` for an ``(n, d)`` matrix."""
    x = np.asarray(contexts, dtype=float)
    subset.check_bounds(x.shape[1])
    return x[:, list(subset.indices)]


class Policy(ABC):
    """Stochastic policy pi(a|x) over ``k`` actions for ``d``-dimensional contexts."""

    kind: ClassVar[str]
    k: int
    d: int

    @property
    def subset(self) -> SubsetMask:
        """Context coordinates the policy depends on."""
        return SubsetMask()

    def probabilities(self, contexts: np.ndarray) -> np.ndarray:
        """Return an ``(n, k)`` matrix of action probabilities."""
        x = np.asarray(contexts, dtype=float)
        if x.ndim == 1:
            x = x.reshape(1, -1)
        if x.shape[1] != self.d:
            raise PolicyError(f"{self.kind} policy expects d={self.d}, got {x.shape[1]}.")
        return self._probabilities(x)

    @abstractmethod
    def _probabilities(self, contexts: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    @abstractmethod
    def to_dict(self) -> dict[str, Any]:
        raise NotImplementedError


@dataclass(frozen=True)
class UniformPolicy(Policy):
    k: int
    d: int
    kind: ClassVar[str] = "uniform"

    def _probabilities(self, contexts: np.ndarray) -> np.ndarray:
        return np.full((contexts.shape[0], self.k), 1.0 / self.k)

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind, "k": self.k, "d": self.d}


@dataclass(frozen=True)
class ConstantActionPolicy(Policy):
    """The policy that always selects ``action``."""

    k: int
    d: int
    action: int
    kind: ClassVar[str] = "constant-action"

    def __post_init__(self) -> None:
        if not 0 <= self.action < self.k:
            raise PolicyError(f"Action {self.action} out of range for k={self.k}.")

    def _probabilities(self, contexts: np.ndarray) -> np.ndarray:
        out = np.zeros((contexts.shape[0], self.k))
        out[:, self.action] = 1.0
        return out

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind, "k": self.k, "d": self.d, "action": self.action}


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max-logit subtraction."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    weights = np.exp(shifted)
    return weights / weights.sum(axis=1, keepdims=True)


@dataclass(frozen=True, eq=False)
class SoftmaxPolicy(Policy):
    """Linear softmax policy over ``X^S``: pi(a|x) ∝ exp(theta_a · x^S + bias_a)."""

    theta: np.ndarray
    mask: SubsetMask
    d: int
    bias: np.ndarray | None = None
    kind: ClassVar[str] = "softmax"

    def __post_init__(self) -> None:
        theta = np.asarray(self.theta, dtype=float)
        if theta.ndim != 2 or theta.shape[1] != len(self.mask):
            raise PolicyError(f"theta must have shape (k, {len(self.mask)}), got {theta.shape}.")
        if not np.all(np.isfinite(theta)):
            raise PolicyError("theta contains non-finite entries.")
        self.mask.check_bounds(self.d)
        bias = np.zeros(theta.shape[0]) if self.bias is None else np.asarray(self.bias, float)
        if bias.shape != (theta.shape[0],):
            raise PolicyError("bias must have one entry per action.")
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "bias", bias)

    @property
    def k(self) -> int:  # type: ignore[override]
        return int(self.theta.shape[0])

    @property
    def subset(self) -> SubsetMask:
        return self.mask

    def logits(self, contexts: np.ndarray) -> np.ndarray:
        xs = restrict_contexts(contexts, self.mask)
        assert self.bias is not None
        return xs @ self.theta.T + self.bias

    def _probabilities(self, contexts: np.ndarray) -> np.ndarray:
        return softmax(self.logits(contexts))

    def to_dict(self) -> dict[str, Any]:
        assert self.bias is not None
        return {
            "kind": self.kind,
            "k": self.k,
            "d": self.d,
            "subset": list(self.mask.indices),
            "theta": self.theta.tolist(),
            "bias": self.bias.tolist(),
        }


@dataclass(frozen=True, eq=False)
class GreedyPolicy(Policy):
    """Deterministic argmax over per-action affine scores of ``X^S``.

    ``coefficients`` has shape ``(k, |S| + 1)`` with the intercept first.
    Ties go to the lowest action index.
    """

    coefficients: np.ndarray
    mask: SubsetMask
    d: int
    kind: ClassVar[str] = "greedy"

    def __post_init__(self) -> None:
        coefficients = np.asarray(self.coefficients, dtype=float)
        if coefficients.ndim != 2 or coefficients.shape[1] != len(self.mask) + 1:
            raise PolicyError(
                f"coefficients must have shape (k, {len(self.mask) + 1}), got {coefficients.shape}."
            )
        self.mask.check_bounds(self.d)
        object.__setattr__(self, "coefficients", coefficients)

    @property
    def k(self) -> int:  # type: ignore[override]
        return int(self.coefficients.shape[0])

    @property
    def subset(self) -> SubsetMask:
        return self.mask

    def scores(self, contexts: np.ndarray) -> np.ndarray:
        xs = restrict_contexts(contexts, self.mask)
        return self.coefficients[:, 0] + xs @ self.coefficients[:, 1:].T

    def choose(self, contexts: np.ndarray) -> np.ndarray:
        x = np.asarray(contexts, dtype=float)
        if x.ndim == 1:
            x = x.reshape(1, -1)
        if x.shape[1] != self.d:
            raise PolicyError(f"greedy policy expects d={self.d}, got {x.shape[1]}.")
        return np.argmax(self.scores(x), axis=1)

    def _probabilities(self, contexts: np.ndarray) -> np.ndarray:
        out = np.zeros((contexts.shape[0], self.k))
        out[np.arange(contexts.shape[0]), np.argmax(self.scores(contexts), axis=1)] = 1.0
        return out

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "k": self.k,
            "d": self.d,
            "subset": list(self.mask.indices),
            "coefficients": self.coefficients.tolist(),
        }


@dataclass(frozen=True, eq=False)
class TabularPolicy(Policy):
    """Lookup table from logged contexts to probability vectors."""

    k: int
    d: int
    table: Mapping[tuple[float, ...], tuple[float, ...]] = field(default_factory=dict)
    kind: ClassVar[str] = "tabular-logged"

    @classmethod
    def from_policy(cls, policy: Policy, data: EnvDataset) -> TabularPolicy:
        """Snapshot ``policy`` at every context logged in ``data``."""
        probs = policy.probabilities(data.contexts)
        table = {
            tuple(float(v) for v in row): tuple(float(p) for p in prob)
            for row, prob in zip(data.contexts, probs, strict=True)
        }
        return cls(k=policy.k, d=data.d, table=table)

    @property
    def subset(self) -> SubsetMask:
        return SubsetMask.full(self.d)

    def _probabilities(self, contexts: np.ndarray) -> np.ndarray:
        out = np.empty((contexts.shape[0], self.k))
        for i, row in enumerate(contexts):
            key = tuple(float(v) for v in row)
            if key not in self.table:
                raise PolicyError(f"Context {key} not present in tabular policy.")
            out[i] = self.table[key]
        return out

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "k": self.k,
            "d": self.d,
            "table": [[list(key), list(value)] for key, value in self.table.items()],
        }


def policy_from_dict(payload: Mapping[str, Any]) -> Policy:
    """Inverse of ``Policy.to_dict``."""
    kind = payload.get("kind")
    k, d = int(payload["k"]), int(payload["d"])
    if kind == UniformPolicy.kind:
        return UniformPolicy(k=k, d=d)
    if kind == ConstantActionPolicy.kind:
        return ConstantActionPolicy(k=k, d=d, action=int(payload["action"]))
    if kind == SoftmaxPolicy.kind:
        return SoftmaxPolicy(
            theta=np.asarray(payload["theta"], dtype=float).reshape(k, len(payload["subset"])),
            mask=SubsetMask.of(payload["subset"]),
            d=d,
            bias=np.asarray(payload["bias"], dtype=float),
        )
    if kind == GreedyPolicy.kind:
        return GreedyPolicy(
            coefficients=np.asarray(payload["coefficients"], dtype=float).reshape(
                k, len(payload["subset"]) + 1
            ),
            mask=SubsetMask.of(payload["subset"]),
            d=d,
        )
    if kind == TabularPolicy.kind:
        table = {tuple(key): tuple(value) for key, value in payload["table"]}
        return TabularPolicy(k=k, d=d, table=table)
    raise PolicyError(f"Unknown policy kind '{kind}'.")


def policy_prob(policy: Policy, context: np.ndarray | list[float], action: int) -> float:
    """pi(action | context)."""
    if not 0 <= action < policy.k:
        raise PolicyError(f"Action {action} out of range for k={policy.k}.")
    return float(policy.probabilities(np.asarray(context, dtype=float).reshape(1, -1))[0, action])


def sample_actions(
    policy: Policy, contexts: np.ndarray, seed: SeedLike
) -> tuple[np.ndarray, np.ndarray]:
    """Draw one action per row by inverse CDF; returns actions and their probabilities."""
    rng = make_rng(seed)
    probs = policy.probabilities(contexts)
    totals = probs.sum(axis=1)
    if np.any(probs < 0) or np.any(np.abs(totals - 1.0) > SUM_TOLERANCE):
        raise PolicyError(f"{policy.kind} policy produced an invalid probability vector.")
    cumulative = np.cumsum(probs, axis=1) / totals[:, None]
    draws = rng.random(probs.shape[0])
    actions = (draws[:, None] >= cumulative).sum(axis=1)
    actions = np.minimum(actions, policy.k - 1)
    return actions, probs[np.arange(probs.shape[0]), actions]


def select_action(policy: Policy, context: np.ndarray | list[float], seed: SeedLike) -> int:
    """Sample a ~ pi(.|x); deterministic given the generator state."""
    actions, _ = sample_actions(policy, np.asarray(context, dtype=float).reshape(1, -1), seed)
    return int(actions[0])
