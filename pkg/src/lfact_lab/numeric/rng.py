"""xoshiro256** pseudo-random generator, seeded through splitmix64.

Pure Python integer arithmetic so a seed yields the same stream on every
platform. Throughput is about a million draws per second, which is plenty for
initialisation, shuffling and desk-scale synthetic data.
"""

from __future__ import annotations

import math

import numpy as np

MASK64 = (1 << 64) - 1
_TWO_M53 = 2.0 ** -53


def splitmix64(state: int) -> tuple[int, int]:
    """Advance a splitmix64 state; returns (new_state, output)."""
    state = (state + 0x9E3779B97F4A7C15) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


class Rng:
    """xoshiro256** generator with convenience samplers."""

    algorithm = "xoshiro256**"

    def __init__(self, seed: int = 0):
        self.seed = seed & MASK64
        sm = self.seed
        s = []
        for _ in range(4):
            sm, out = splitmix64(sm)
            s.append(out)
        self._s = s

    @classmethod
    def from_state(cls, state: tuple[int, int, int, int]) -> "Rng":
        if len(state) != 4 or not any(state):
            raise ValueError("xoshiro256** state must be four words, not all zero")
        r = cls.__new__(cls)
        r.seed = None
        r._s = [w & MASK64 for w in state]
        return r

    @property
    def state(self) -> tuple[int, int, int, int]:
        return tuple(self._s)

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s
        x = (s1 * 5) & MASK64
        result = ((((x << 7) | (x >> 57)) & MASK64) * 9) & MASK64
        t = (s1 << 17) & MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = ((s3 << 45) | (s3 >> 19)) & MASK64
        self._s = [s0, s1, s2, s3]
        return result

    def spawn(self) -> "Rng":
        """Child generator seeded from this stream."""
        return Rng(self.next_u64())

    def random(self) -> float:
        """Uniform double in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * _TWO_M53

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        if size is None:
            return low + (high - low) * self.random()
        n = int(np.prod(size))
        nxt = self.next_u64
        u = np.fromiter(((nxt() >> 11) * _TWO_M53 for _ in range(n)), dtype=np.float64, count=n)
        return (low + (high - low) * u).reshape(size)

    def normal(self, size=None):
        """Standard normal draws via Box-Muller (pairs consumed in order)."""
        n = 1 if size is None else int(np.prod(size))
        m = (n + 1) // 2
        u1 = 1.0 - self.uniform(size=m)  # (0, 1]
        u2 = self.uniform(size=m)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * math.pi * u2
        z = np.empty(2 * m)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        if size is None:
            return float(z[0])
        return z[:n].reshape(size)

    def integers(self, n: int) -> int:
        """Unbiased integer in [0, n)."""
        if n <= 0:
            raise ValueError("n must be positive")
        limit = ((MASK64 + 1) // n) * n
        while True:
            x = self.next_u64()
            if x < limit:
                return x % n

    def integers_array(self, n: int, size) -> np.ndarray:
        count = int(np.prod(size))
        return np.array([self.integers(n) for _ in range(count)], dtype=np.int64).reshape(size)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of range(n)."""
        a = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.integers(i + 1)
            a[i], a[j] = a[j], a[i]
        return np.array(a, dtype=np.int64)

    def sample(self, n: int, k: int) -> np.ndarray:
        """k distinct values from range(n), in draw order (partial Fisher-Yates)."""
        if k > n:
            raise ValueError(f"cannot draw {k} distinct values from {n}")
        swapped: dict[int, int] = {}
        out = []
        for i in range(k):
            j = i + self.integers(n - i)
            out.append(swapped.get(j, j))
            swapped[j] = swapped.get(i, i)
        return np.array(out, dtype=np.int64)
