"""Pinned, platform-independent random streams.

Every stochastic choice in the project (class-order shuffling, synthetic
data, weight init, Bernoulli masks) is drawn from a Philox4x64 counter-based
generator keyed by an explicit tuple of integers.  Philox is fully specified
by its key, so identical tuples give bit-identical streams on every platform
and numpy version.
"""
from __future__ import annotations

import numpy as np

_M64 = (1 << 64) - 1

# stream purpose tags, kept distinct so streams never collide
TAG_SPLIT = 1
TAG_DATA = 2
TAG_BACKBONE = 3
TAG_ADAPTER = 4
TAG_SHUFFLE = 5
TAG_MASK = 6
TAG_ALIGN = 7


def _splitmix64(z: int) -> int:
    z = (z + 0x9E3779B97F4A7C15) & _M64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _M64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _M64
    return z ^ (z >> 31)


def mix_key(*parts: int) -> np.ndarray:
    """Hash an integer tuple into a 128-bit Philox key (two uint64 words)."""
    h = 0
    for p in parts:
        h = _splitmix64(h ^ (int(p) & _M64))
    lo = _splitmix64(h)
    hi = _splitmix64(lo)
    return np.array([lo, hi], dtype=np.uint64)


def stream_rng(*parts: int) -> np.random.Generator:
    """Generator for the stream identified by ``parts``."""
    return np.random.Generator(np.random.Philox(key=mix_key(*parts)))
