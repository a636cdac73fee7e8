"""Seeded random streams.

Every run draws from numpy's PCG64 bit generator, which produces identical
streams on every platform for a given seed. A master seed is split into
independent per-purpose streams (init, data, noise, inference, ...) by mixing
a stable CRC32 of the purpose name into the seed sequence.
"""

from __future__ import annotations

import zlib

import numpy as np


def purpose_key(purpose: str) -> int:
    return zlib.crc32(purpose.encode("utf-8"))


def make_rng(seed: int, purpose: str = "", *index: int) -> np.random.Generator:
    """Return an independent generator for ``(seed, purpose, *index)``."""
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    key = [purpose_key(purpose), *(int(i) for i in index)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy, spawn_key=key)))


def child_seed(rng: np.random.Generator) -> int:
    """Draw a 63-bit seed from ``rng`` for a downstream stream."""
    return int(rng.integers(0, 2**63 - 1))
