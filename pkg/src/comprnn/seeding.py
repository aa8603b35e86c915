"""Deterministic fan-out of one master seed into named substreams.

Every source of randomness in the pipeline (task-set generation, holdout
sampling, weight init, episode order, code shuffling) draws its seed from
`derive_seed(master, name)`, so a whole experiment is quotable as a single
integer.  PCG64 keeps streams reproducible across platforms.
"""
from __future__ import annotations

import zlib

import numpy as np


def derive_seed(master_seed: int, stream: str) -> int:
    """64-bit seed for a named substream; a pure function of its arguments."""
    entropy = [master_seed & 0xFFFFFFFFFFFFFFFF, zlib.crc32(stream.encode("utf-8"))]
    return int(np.random.SeedSequence(entropy).generate_state(1, np.uint64)[0])


def rng_for(master_seed: int, stream: str) -> np.random.Generator:
    """PCG64 generator seeded from the named substream."""
    return np.random.default_rng(derive_seed(master_seed, stream))
