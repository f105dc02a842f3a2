"""Keyed random streams.

Every random draw in the package comes from a Philox (counter-based)
generator whose key is derived from ``(seed, purpose, index, ...)``.  A
stream therefore depends only on its key, never on how many other
streams were consumed before it, which makes parallel schedules produce
identical numbers.
"""

from __future__ import annotations

from typing import Sequence, Union

import numpy as np

Seed = Union[int, Sequence[int]]

# purpose tags, part of every key
WEIGHTS = 1
DGP = 2
BOOTSTRAP = 3


def as_key(seed: Seed) -> tuple[int, ...]:
    key = (seed,) if isinstance(seed, (int, np.integer)) else tuple(seed)
    if not key or any(int(k) < 0 for k in key):
        raise ValueError(f"seed must be a non-negative integer or a tuple of them, got {seed!r}")
    return tuple(int(k) for k in key)


def stream(seed: Seed, *path: int) -> np.random.Generator:
    """Generator for the substream ``seed / path``."""
    key = as_key(seed) + tuple(int(p) for p in path)
    ss = np.random.SeedSequence(entropy=key[0], spawn_key=key[1:])
    return np.random.Generator(np.random.Philox(ss))
