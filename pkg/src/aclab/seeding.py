"""Deterministic 64-bit seed derivation.

Every stochastic component derives its RNG from mix64 over a tuple of
identifying values, so results never depend on execution order, worker
count, or PYTHONHASHSEED.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _splitmix64(x):
    x = (x + _GOLDEN) & _MASK
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def _fold(value):
    if isinstance(value, str):
        return int.from_bytes(
            hashlib.blake2b(value.encode("utf-8"), digest_size=8).digest(), "little"
        )
    if isinstance(value, (bool, int, np.integer)):
        return int(value) & _MASK
    raise TypeError(f"mix64 cannot fold {type(value).__name__}")


def mix64(*parts):
    """Hash a tuple of ints/strings into a 64-bit seed."""
    h = 0
    for p in parts:
        h = _splitmix64(h ^ _fold(p))
    return h


def rng_for(*parts):
    """numpy Generator seeded from mix64(parts)."""
    return np.random.default_rng(mix64(*parts))
