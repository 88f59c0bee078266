"""Seeded random streams.

All randomness is drawn from numpy's Philox-4x64 counter-based bit generator,
which produces the same stream for the same key on every platform. Child
streams are keyed by ``sha256(f"{seed}:{purpose}")`` truncated to 64 bits, so
adding a new consumer never shifts the draws of an existing one.
"""

from __future__ import annotations

import hashlib

import numpy as np

ALGORITHM = "philox4x64-10"


def derive_seed(seed: int, purpose: str) -> int:
    digest = hashlib.sha256(f"{int(seed)}:{purpose}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


class Rng:
    """A Philox stream plus the seed it was built from."""

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.algorithm = ALGORITHM
        self.gen = np.random.Generator(np.random.Philox(key=self.seed))

    def child(self, purpose: str) -> "Rng":
        return Rng(derive_seed(self.seed, purpose))

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        return self.gen.normal(0.0, std, size=shape)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size=size)

    def permutation(self, n):
        return self.gen.permutation(n)

    def choice(self, a, size=None, replace=True):
        return self.gen.choice(a, size=size, replace=replace)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size=size)
