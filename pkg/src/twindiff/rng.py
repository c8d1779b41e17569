"""Named random sub-streams derived from one root seed.

Every source of randomness in the package draws from a stream keyed by
(seed, purpose), so changing how one component consumes randomness never
reshuffles the draws seen by another.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError

# Stable stream ids; never renumber, only append.
_STREAM_IDS = {
    "init": 1,
    "train": 2,
    "negative": 3,
    "sample": 4,
    "toy": 5,
    "eval": 6,
    "data": 7,
}


def substream(seed: int, name: str, *key: int) -> np.random.Generator:
    """Return the generator for the named sub-stream of ``seed``.

    Extra ``key`` components derive further independent streams, e.g. one
    per resume position or per worker."""
    if name not in _STREAM_IDS:
        raise ConfigError(f"unknown rng stream {name!r}; one of {sorted(_STREAM_IDS)}")
    entropy = [int(seed), _STREAM_IDS[name], *(int(k) for k in key)]
    return np.random.default_rng(np.random.SeedSequence(entropy))
