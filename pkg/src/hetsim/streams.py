"""Seeded, splittable random streams.

A stream is a :class:`numpy.random.Generator` over PCG64. Substreams are
derived with :class:`numpy.random.SeedSequence` spawn keys, so replication
``r`` of seed ``s`` is the same sequence no matter how many workers run.
"""
from __future__ import annotations

import numpy as np

RandomStream = np.random.Generator
GENERATOR_ID = "numpy.random.PCG64/SeedSequence"


def make_stream(seed: int, *key: int) -> RandomStream:
    if not 0 <= int(seed) < 2**64:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed!r}")
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))
