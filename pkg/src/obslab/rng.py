"""Reproducible random-stream derivation.

Every image, chain and training run draws from its own stream whose seed is a
64-bit mix of ``(master seed, purpose tag, index)``. Streams for different
purposes never share state, so train/validation/test data stay independent
and generation can be reordered or parallelised without changing results.
"""
import hashlib

import numpy as np

_MASK = (1 << 64) - 1


def _splitmix64(x):
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK
    return x ^ (x >> 31)


def tag_id(tag: str) -> int:
    """Stable 64-bit identifier of a purpose tag."""
    return int.from_bytes(hashlib.blake2b(tag.encode(), digest_size=8).digest(), "little")


def child_seed(master: int, tag: str, index: int = 0) -> int:
    h = _splitmix64(int(master) & _MASK)
    h = _splitmix64(h ^ tag_id(tag))
    return _splitmix64(h ^ (int(index) & _MASK))


def stream(master: int, tag: str, index: int = 0) -> np.random.Generator:
    """Independent generator for ``(master, tag, index)``."""
    return np.random.Generator(np.random.PCG64(child_seed(master, tag, index)))
