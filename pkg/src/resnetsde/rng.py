"""Seed management for reproducible Monte Carlo runs.

One master seed per experiment.  Independent substreams are derived from
(seed, key...) counters, so a batch of draws can be generated in any order,
split across workers, or regenerated later (e.g. to replay the weight noise
of a stored path) without storing the draws themselves.
"""

from __future__ import annotations

import numpy as np

__all__ = ["substream"]


def substream(seed: int, *key: int) -> np.random.Generator:
    """Return an independent generator for the given (seed, key...) counter.

    The same (seed, key) always yields the same stream; distinct keys yield
    statistically independent streams.  Reproducible within this
    implementation and platform, not across libraries.
    """
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(key)))
