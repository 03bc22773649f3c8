"""Deterministic per-entity random streams.

One scenario seed fans out into independent PCG64 streams, one per label
tuple. Streams are keyed by a hash of their labels rather than by spawn
order, so attaching an extra consumer (an observer, a debug probe) never
shifts the randomness seen by anyone else.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_stream(seed: int, *labels) -> np.random.Generator:
    """Return the generator for (seed, labels); same inputs, same stream."""
    tag = hashlib.sha256(repr(labels).encode()).digest()
    words = [int.from_bytes(tag[i : i + 8], "big") for i in range(0, 32, 8)]
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *words])
    return np.random.Generator(np.random.PCG64(ss))
