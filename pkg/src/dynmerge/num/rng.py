"""Deterministic random streams.

Raw bits come from the counter-based Philox-4x64 generator with an explicit
two-word key ``(seed, stream)``; uniforms are the top 53 bits of each raw word
scaled by 2**-53. Normals use the Box-Muller transform on consecutive uniform
pairs (cosine branch first, then sine). Neither transform depends on numpy's
own distribution code, so a given key always yields the same values.
"""
from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


class Rng:
    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        self._bits = np.random.Philox(key=np.array([self.seed, self.stream], dtype=np.uint64))

    def split(self, stream: int) -> "Rng":
        """Independent child stream keyed by (seed, hash of parent stream and id)."""
        child = (self.stream * 0x9E3779B97F4A7C15 + int(stream) + 1) & _MASK64
        return Rng(self.seed, child)

    def raw(self, n: int) -> np.ndarray:
        if n <= 0:
            return np.zeros(0, dtype=np.uint64)
        return self._bits.random_raw(n).astype(np.uint64)

    def uniform(self, shape) -> np.ndarray:
        """float64 uniforms in [0, 1)."""
        n = int(np.prod(shape, dtype=np.int64))
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return u.reshape(shape)

    def normal(self, shape, mean=0.0, std=1.0) -> np.ndarray:
        if std < 0:
            raise ValueError(f"std must be non-negative, got {std}")
        n = int(np.prod(shape, dtype=np.int64))
        pairs = (n + 1) // 2
        u = self.uniform((pairs, 2))
        r = np.sqrt(-2.0 * np.log(1.0 - u[:, 0]))
        theta = 2.0 * np.pi * u[:, 1]
        z = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1).reshape(-1)[:n]
        return (mean + std * z).reshape(shape)

    def truncated_normal(self, shape, std=1.0, bound=3.0) -> np.ndarray:
        """Normal(0, std) with draws beyond +-bound*std redrawn."""
        z = self.normal(shape)
        bad = np.abs(z) > bound
        while bad.any():
            z[bad] = self.normal((int(bad.sum()),))
            bad = np.abs(z) > bound
        return z * std

    def bernoulli(self, probs) -> np.ndarray:
        probs = np.asarray(probs, dtype=np.float64)
        return (self.uniform(probs.shape) < probs).astype(np.int8)

    def integers(self, n: int, high: int) -> np.ndarray:
        """n integers in [0, high)."""
        return np.minimum((self.uniform((n,)) * high).astype(np.int64), high - 1)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform((n,)), kind="stable")


def rng(seed: int) -> Rng:
    return Rng(seed)


def fill_normal(stream: Rng, shape, mean=0.0, std=1.0):
    return stream.normal(shape, mean, std)


def fill_bernoulli(stream: Rng, probs):
    return stream.bernoulli(probs)
