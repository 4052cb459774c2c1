"""Deterministic random numbers, identical across platforms.

Two published generators, written out in full so every draw is reproducible
bit-for-bit from a 64-bit seed regardless of Python/numpy version:

* splitmix64 (Steele, Lea, Flood 2014) - used for seeding and for
  counter-based bulk draws (it is stateless given a counter, so array
  fills vectorize cleanly in numpy).
* xoshiro256** (Blackman, Vigna 2018) - the sequential stream behind
  scalar draws (sampling, bounded ints).
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
# 2^-53: top 53 bits of a u64 map to a uniform double in [0, 1).
_U53_INV = 1.0 / (1 << 53)


def splitmix64(x: int) -> int:
    """One output of splitmix64 for state ``x`` (state advance is +GOLDEN)."""
    z = (x + _GOLDEN) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def _splitmix64_array(start: int, n: int) -> np.ndarray:
    """splitmix64 outputs for states start+1..start+n, vectorized (uint64)."""
    with np.errstate(over="ignore"):
        x = np.arange(1, n + 1, dtype=np.uint64)
        x = x * np.uint64(_GOLDEN) + np.uint64(start & _MASK64)
        x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return x ^ (x >> np.uint64(31))


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK64


class Rng:
    """xoshiro256** stream with deterministic array helpers.

    Single-owner mutable state: never share one instance between concurrent
    decode sessions.
    """

    def __init__(self, seed: int):
        self.seed = seed & _MASK64
        s, state = self.seed, []
        for _ in range(4):
            state.append(splitmix64(s))
            s = (s + _GOLDEN) & _MASK64
        self._s = state

    def next_u64(self) -> int:
        s = self._s
        result = (_rotl((s[1] * 5) & _MASK64, 7) * 9) & _MASK64
        t = (s[1] << 17) & _MASK64
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        return result

    def uniform(self) -> float:
        """One double in [0, 1)."""
        return (self.next_u64() >> 11) * _U53_INV

    def randint(self, n: int) -> int:
        """Unbiased integer in [0, n) via rejection sampling."""
        if n <= 0:
            raise ValueError("randint bound must be positive")
        limit = _MASK64 + 1 - ((_MASK64 + 1) % n)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % n

    def child(self) -> "Rng":
        """Independent derived stream (deterministic given this stream)."""
        return Rng(self.next_u64())

    # Bulk draws consume one stream value as a counter base and fill the
    # array with splitmix64(base + i); this keeps big fills fast while
    # staying reproducible and platform independent.
    def uniform_array(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        n = int(np.prod(shape)) if shape else 1
        base = self.next_u64()
        u = (_splitmix64_array(base, n) >> np.uint64(11)).astype(np.float64) * _U53_INV
        return (low + (high - low) * u).reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        """Deterministic permutation of range(n) (sort by per-index keys)."""
        base = self.next_u64()
        return np.argsort(_splitmix64_array(base, n), kind="stable")
