"""Deterministic fan-out of random streams from a master seed."""

from __future__ import annotations

import hashlib

import numpy as np


def _key_bytes(key) -> bytes:
    if isinstance(key, float):
        # snap so that 0.1 + 0.2 and 0.3 name the same stream
        return repr(round(key, 9)).encode()
    return repr(key).encode()


def derive_seed(master: int, *keys) -> np.random.SeedSequence:
    """Seed sequence for ``(master, *keys)``; independent of call order."""
    h = hashlib.blake2b(digest_size=16)
    for k in keys:
        h.update(_key_bytes(k))
        h.update(b"\x1f")
    words = np.frombuffer(h.digest(), dtype=np.uint32).tolist()
    return np.random.SeedSequence([int(master) & 0xFFFFFFFF, *words])


def child_rng(master: int, *keys) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *keys))


def as_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)
