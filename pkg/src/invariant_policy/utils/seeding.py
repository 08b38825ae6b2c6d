"""Deterministic seed derivation for repetitions, environments and subsets."""

from __future__ import annotations

import numpy as np

SeedLike = int | np.random.Generator


def derive_seed(master: int, *keys: int) -> int:
    """Hash a master seed with integer keys into an independent 63-bit seed."""
    sequence = np.random.SeedSequence(entropy=int(master), spawn_key=tuple(int(k) for k in keys))
    return int(sequence.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def make_rng(seed: SeedLike) -> np.random.Generator:
    """Accept a seed or an existing generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(int(seed))
