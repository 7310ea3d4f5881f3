"""Deterministic seed derivation; all randomness flows from explicit keys."""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(*keys: int | str) -> int:
    """Stable 63-bit seed from a mixed key tuple (platform independent)."""
    h = hashlib.blake2b(digest_size=8)
    for k in keys:
        if isinstance(k, str):
            h.update(b"s" + k.encode())
        else:
            h.update(b"i" + int(k).to_bytes(16, "little", signed=True))
    return int.from_bytes(h.digest(), "little") >> 1


def rng_from(*keys: int | str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(derive_seed(*keys)))
