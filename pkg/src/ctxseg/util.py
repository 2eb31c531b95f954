"""Seed derivation and hashing shared across modules.

All randomness in the package flows through counter-based Philox generators
keyed by 64-bit FNV-1a hashes, so every artifact is a pure function of the
seeds that produced it, independent of execution order.
"""

from __future__ import annotations

import numpy as np

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x00000100000001B3
_MASK = 0xFFFFFFFFFFFFFFFF


def fnv1a_bytes(data: bytes) -> int:
    h = FNV_OFFSET
    for b in data:
        h = ((h ^ b) * FNV_PRIME) & _MASK
    return h


def fnv1a_str(s: str) -> int:
    return fnv1a_bytes(s.encode("utf-8"))


def mix64(*vals: int) -> int:
    """Fold any number of integers into one 64-bit seed."""
    buf = b"".join(int(v).to_bytes(8, "little", signed=False) for v in vals)
    return fnv1a_bytes(buf)


def rng_from(*vals: int) -> np.random.Generator:
    """Philox generator keyed by the hash of the given integers."""
    return np.random.Generator(np.random.Philox(key=[mix64(*vals), 0x5EED]))
