"""Deterministic seed derivation.

Every stochastic routine in the package draws from its own RNG stream,
derived from a root seed plus a string/int path. Streams are therefore
stable under reordering of unrelated work (e.g. parallel grid cells).
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(*parts: int | str) -> int:
    """Hash a (root seed, *path) tuple into a 63-bit integer seed."""
    h = hashlib.blake2b(digest_size=8)
    for part in parts:
        if isinstance(part, bool) or not isinstance(part, (int, str)):
            raise TypeError(f"seed parts must be int or str, got {type(part).__name__}")
        tag = b"i" if isinstance(part, int) else b"s"
        h.update(tag + str(part).encode("utf-8") + b"\x00")
    return int.from_bytes(h.digest(), "little") >> 1


def rng_for(*parts: int | str) -> np.random.Generator:
    """PCG64 generator for the stream named by the seed path."""
    return np.random.default_rng(derive_seed(*parts))
