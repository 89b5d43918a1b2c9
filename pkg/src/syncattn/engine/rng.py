"""Counter-based SplitMix64 generator.

Output ``i`` of a stream is ``mix64(key + (counter + i + 1) * GAMMA)`` with the
SplitMix64 finalizer, so any position of the stream can be produced
independently and the whole thing vectorizes over numpy uint64. Uniform
doubles take the top 53 bits; normals use Box-Muller on consecutive pairs.
"""
from __future__ import annotations

import numpy as np

from .tensor import Tensor, SETTINGS

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def derive_seed(*parts: int) -> int:
    """Fold integers into one 64-bit seed (used for per-call dropout streams etc.)."""
    acc = np.uint64(0x6A09E667F3BCC909)
    with np.errstate(over="ignore"):
        for p in parts:
            acc = _mix64(np.array([acc ^ np.uint64(int(p) & _MASK64)]) + _GAMMA)[0]
    return int(acc)


class SeededRng:
    """Deterministic stream; identical seed gives identical samples everywhere."""

    algorithm = "splitmix64-counter"

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self._key = _mix64(np.array([self.seed], dtype=np.uint64))[0]
        self.counter = 0

    def __repr__(self):
        return f"SeededRng(seed={self.seed}, counter={self.counter})"

    def raw(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            return _mix64(self._key + idx * _GAMMA)

    def uniform(self, n: int, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        return low + (high - low) * u

    def normal(self, n: int, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        m = (n + 1) // 2
        u = self.uniform(2 * m)
        u1 = 1.0 - u[0::2]  # (0, 1], keeps log finite
        u2 = u[1::2]
        rad = np.sqrt(-2.0 * np.log(u1))
        z = np.empty(2 * m)
        z[0::2] = rad * np.cos(2 * np.pi * u2)
        z[1::2] = rad * np.sin(2 * np.pi * u2)
        return mean + std * z[:n]

    def integers(self, n: int, high: int) -> np.ndarray:
        """Uniform ints in [0, high) via the multiply-shift reduction."""
        return np.floor(self.uniform(n) * high).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")

    def spawn(self, *parts: int) -> "SeededRng":
        return SeededRng(derive_seed(self.seed, *parts))


def sample_gaussian(rng: SeededRng, n: int, mean: float = 0.0, std: float = 1.0) -> Tensor:
    if std < 0:
        raise ValueError("std must be non-negative")
    z = rng.normal(n, mean, std).astype(SETTINGS.dtype)
    return Tensor._wrap(z, "sample_gaussian")
