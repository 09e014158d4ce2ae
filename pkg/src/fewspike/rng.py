"""Seeded random-number substreams.

Every stochastic choice in the package draws from a named substream of one
global seed. Substreams are independent: adding or removing draws from one
never perturbs another.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _name_entropy(name: object) -> int:
    digest = hashlib.sha256(str(name).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def substream(seed: int, *names: object) -> np.random.Generator:
    """Return a generator for the substream (seed, *names).

    Names may be strings or integers; they are hashed into the seed
    sequence, so any distinct name tuple yields an independent stream.
    """
    entropy = [int(seed)] + [_name_entropy(n) for n in names]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def substream_seed(seed: int, *names: object) -> int:
    """Derive a 63-bit child seed for the substream (seed, *names).

    Used where a seed must be recorded in a manifest and replayed later.
    """
    entropy = [int(seed)] + [_name_entropy(n) for n in names]
    return int(np.random.SeedSequence(entropy).generate_state(1, np.uint64)[0] >> 1)
