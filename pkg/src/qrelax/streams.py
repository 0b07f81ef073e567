"""Per-trajectory random streams.

Every trajectory gets its own PCG64 generator whose seed sequence is derived
from ``(seed, index)`` through numpy's ``SeedSequence`` spawn-key mechanism, so
an ensemble is bit-reproducible no matter how trajectories are scheduled.
"""

from __future__ import annotations

import os

import numpy as np

DEFAULT_SEED = 20030917
SEED_ENV = "QRELAX_SEED"


def trajectory_rng(seed: int, index: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=(int(index),))
    return np.random.Generator(np.random.PCG64(ss))


def resolve_seed(seed: int | None = None) -> int:
    """Explicit seed, else ``$QRELAX_SEED``, else the package default."""
    if seed is not None:
        return int(seed)
    env = os.environ.get(SEED_ENV)
    if env:
        try:
            return int(env)
        except ValueError:
            raise ValueError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    return DEFAULT_SEED
