"""Seeded counter-based random streams.

Every stochastic routine takes an integer seed (or a ``SeedSequence``) and
builds its own Philox generator, so nothing depends on global state and
independent trials can be derived from one root seed.
"""

from __future__ import annotations

from typing import Union

import numpy as np

SeedLike = Union[int, np.random.SeedSequence]


def generator(seed: SeedLike) -> np.random.Generator:
    """Return a Philox-backed generator for ``seed``."""
    if isinstance(seed, np.random.SeedSequence):
        return np.random.Generator(np.random.Philox(seed))
    if isinstance(seed, (int, np.integer)) and not isinstance(seed, bool):
        if seed < 0:
            raise ValueError("seed must be nonnegative")
        return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))
    raise TypeError(f"unsupported seed type {type(seed).__name__}")


def trial_seeds(root: SeedLike, count: int) -> list[np.random.SeedSequence]:
    """Split ``root`` into ``count`` independent child seeds, one per trial."""
    if isinstance(root, np.random.SeedSequence):
        seq = root
    else:
        seq = np.random.SeedSequence(int(root))
    return seq.spawn(count)


def child(root: SeedLike, *path: int) -> np.random.SeedSequence:
    """Deterministic child seed addressed by an integer path.

    ``child(7, 3, 1)`` is the same stream on every call, regardless of how
    many other children have been requested.
    """
    key = tuple(int(p) for p in path)
    if isinstance(root, np.random.SeedSequence):
        return np.random.SeedSequence(root.entropy, spawn_key=tuple(root.spawn_key) + key)
    return np.random.SeedSequence(int(root), spawn_key=key)
