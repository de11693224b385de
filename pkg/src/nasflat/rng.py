"""Deterministic seed derivation.

All randomness in the package flows from integer seeds. Sub-seeds are derived
by hashing (master seed, name) with SHA-256, never with Python's salted
hash(), so runs reproduce byte-for-byte across processes and machines.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stable_seed(*parts: object) -> int:
    """Derive a 63-bit seed from an arbitrary tuple of printable parts."""
    key = ":".join(str(p) for p in parts)
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def rng_for(*parts: object) -> np.random.Generator:
    """A numpy Generator seeded from stable_seed(*parts)."""
    return np.random.default_rng(stable_seed(*parts))
