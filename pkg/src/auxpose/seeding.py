"""Deterministic seed derivation and a portable 64-bit generator.

Scene generation uses SplitMix64 so that datasets are bit-reproducible
across platforms and Python versions.  Everything else (weight init,
epoch shuffling) uses numpy generators keyed by seeds derived here.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = 0xFFFFFFFFFFFFFFFF


class SplitMix64:
    """SplitMix64 generator (Steele, Lea & Flood's mixing constants).

    state += 0x9E3779B97F4A7C15
    z = state; z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    return z ^ (z >> 31)
    """

    def __init__(self, seed: int):
        self.state = seed & _MASK64

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        # 53 high bits -> double in [0, 1)
        u = self.next_u64() >> 11
        return lo + (hi - lo) * (u * (1.0 / (1 << 53)))

    def randint(self, n: int) -> int:
        """Integer in [0, n) by rejection (no modulo bias)."""
        if n <= 0:
            raise ValueError("randint bound must be positive")
        limit = (_MASK64 + 1) - ((_MASK64 + 1) % n)
        while True:
            u = self.next_u64()
            if u < limit:
                return u % n


def derive_seed(root_seed: int, label: str) -> int:
    """Derive a component seed from the run seed and a label.

    Uses SHA-256 of "<root_seed>:<label>" truncated to 64 bits, so
    components stay decoupled and the derivation is documented and stable.
    """
    digest = hashlib.sha256(f"{root_seed}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def rng_for(root_seed: int, label: str) -> np.random.Generator:
    """numpy Generator keyed by a derived seed."""
    return np.random.Generator(np.random.PCG64(derive_seed(root_seed, label)))
