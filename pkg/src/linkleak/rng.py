"""Seeded random streams and deterministic seed derivation.

Every stochastic choice in the lab (splits, sampling, init, dropout,
pair draws) flows through a SeededRng so that a run is a pure function
of its config and seed list.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def _fnv1a64(s: str) -> int:
    h = 0xCBF29CE484222325
    for b in s.encode("utf-8"):
        h ^= b
        h = (h * 0x100000001B3) & _MASK64
    return h


def derive_seed(seed: int, tag: str) -> int:
    """Derive an independent child seed from (seed, tag).

    Used to give each pipeline stage (split, partial sample, shadow
    training, vendor training, ...) its own stream, so enabling or
    disabling one stage never perturbs another stage's draws.
    """
    return _splitmix64((int(seed) & _MASK64) ^ _fnv1a64(tag))


class SeededRng:
    """Deterministic random stream: identical seed, identical draws.

    Thin wrapper over numpy's PCG64 generator, whose stream is stable
    across runs and platforms for a fixed numpy major version.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def spawn(self, tag: str) -> "SeededRng":
        return SeededRng(derive_seed(self.seed, tag))

    def uniform(self, low=0.0, high=1.0, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None) -> np.ndarray:
        return self._gen.normal(loc, scale, size)

    def integers(self, low, high, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice_without_replacement(self, n: int, k: int) -> np.ndarray:
        if k > n:
            raise ValueError(f"cannot draw {k} items from {n} without replacement")
        return self._gen.choice(n, size=k, replace=False)

    def keep_mask(self, shape, keep_prob: float) -> np.ndarray:
        """Bernoulli keep mask (True with probability keep_prob)."""
        return self._gen.random(shape) < keep_prob
