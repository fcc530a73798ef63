"""Seed handling: every stochastic routine is deterministic given an integer seed.

Streams are derived with ``numpy.random.SeedSequence.spawn`` so that replicate
``i`` depends only on ``(seed, i)``; replicates can run in any order without
changing their draws.
"""

from __future__ import annotations

import numpy as np


def as_generator(seed) -> np.random.Generator:
    """Return a Generator from an int seed, a Generator, or a SeedSequence."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def spawn_generators(seed: int, n: int) -> list[np.random.Generator]:
    """Derive ``n`` independent, order-insensitive generator streams."""
    return [np.random.default_rng(ss) for ss in np.random.SeedSequence(seed).spawn(n)]
