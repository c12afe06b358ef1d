"""Portable seeded randomness for support sampling and bank construction.

A fixed splitmix64 stream keeps "seed 0" meaning the same draw sequence on
every platform and Python version, unlike random.Random whose shuffle
implementation is not contractually stable. All engine-level sampling
(support selection, global-token choice) goes through SplitMix64.
"""
from __future__ import annotations

_MASK = (1 << 64) - 1


class SplitMix64:
    """splitmix64 generator (Steele et al.): 64-bit state, one mix per draw."""

    def __init__(self, seed: int):
        self._state = seed & _MASK

    def next_u64(self) -> int:
        self._state = (self._state + 0x9E3779B97F4A7C15) & _MASK
        z = self._state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
        return z ^ (z >> 31)

    def randrange(self, n: int) -> int:
        """Uniform integer in [0, n) by rejection (no modulo bias)."""
        if n <= 0:
            raise ValueError("randrange needs n >= 1")
        limit = (_MASK + 1) - ((_MASK + 1) % n)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % n

    def sample(self, n: int, k: int) -> list[int]:
        """k distinct indices from range(n), via partial Fisher-Yates.

        Draw order is part of the contract: the same (seed, n, k) always
        yields the same index sequence.
        """
        if k > n:
            raise ValueError(f"cannot sample {k} from a pool of {n}")
        pool = list(range(n))
        out = []
        for i in range(k):
            j = i + self.randrange(n - i)
            pool[i], pool[j] = pool[j], pool[i]
            out.append(pool[i])
        return out
