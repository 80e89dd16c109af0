"""Reproducible random streams.

Raw 64-bit words come from the Philox-4x64 counter-based generator, seeded
through numpy's ``SeedSequence``; both are specified independently of the
host platform. Doubles take the top 53 bits of each word and Gaussian draws
use Box-Muller, so streams do not depend on numpy's sampling routines.
"""
from __future__ import annotations

import math

import numpy as np

_TWO_POW_M53 = 1.0 / (1 << 53)


class Rng:
    def __init__(self, seed: int, *path: int):
        if seed < 0 or seed >= 1 << 64:
            raise ValueError(f"seed must fit in 64 unsigned bits, got {seed}")
        self.seed = int(seed)
        self.path = tuple(int(p) for p in path)
        self._bits = np.random.Philox(np.random.SeedSequence([self.seed, *self.path]))

    def child(self, index: int) -> "Rng":
        """Independent stream for ``index``; does not advance this one."""
        return Rng(self.seed, *self.path, index)

    def raw(self, n: int) -> np.ndarray:
        return self._bits.random_raw(n).astype(np.uint64)

    def uniform(self, shape=()) -> np.ndarray | float:
        n = math.prod(shape) if shape else 1
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * _TWO_POW_M53
        return float(u[0]) if shape == () else u.reshape(shape)

    def normal(self, shape, std: float = 1.0, mean: float = 0.0) -> np.ndarray:
        n = math.prod(shape)
        pairs = (n + 1) // 2
        u1 = 1.0 - self.uniform((pairs,))  # (0, 1], keeps log finite
        u2 = self.uniform((pairs,))
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.empty(2 * pairs)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        return mean + std * z[:n].reshape(shape)

    def integers(self, low: int, high: int, size: int | None = None):
        """Uniform integers in ``[low, high)``."""
        if high <= low:
            raise ValueError(f"empty range [{low}, {high})")
        span = np.uint64(high - low)
        vals = (self.raw(1 if size is None else size) % span).astype(np.int64) + low
        return int(vals[0]) if size is None else vals

    def choice(self, seq):
        return seq[self.integers(0, len(seq))]

    def permutation(self, n: int) -> np.ndarray:
        perm = np.arange(n)
        for i in range(n - 1, 0, -1):
            j = self.integers(0, i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return perm
