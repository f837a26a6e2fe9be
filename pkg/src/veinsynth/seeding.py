"""Hierarchical seed derivation and counter-based random streams.

Every random draw in the package comes from a ``numpy.random.Philox``
generator keyed by a 64-bit seed. Philox is counter-based, so a given key
yields the same stream on every platform and numpy build that ships it.

Child seeds are derived with BLAKE2b (8-byte digest) over the UTF-8 string
``"<master>:<index>:<tag>"``. Python's ``hash()`` is salted per process and
is never used.
"""

from __future__ import annotations

import hashlib

import numpy as np

SEED_MASK = (1 << 64) - 1


def derive_seed(master: int, index: int, tag: str) -> int:
    """Derive a 64-bit child seed from ``(master, index, tag)``."""
    key = f"{int(master) & SEED_MASK}:{int(index)}:{tag}".encode()
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little")


def make_rng(seed: int) -> np.random.Generator:
    """Philox generator keyed by a 64-bit seed."""
    return np.random.Generator(np.random.Philox(key=int(seed) & SEED_MASK))
