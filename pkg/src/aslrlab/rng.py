"""SplitMix64 generator used for every layout decision.

Layouts must be bit-for-bit reproducible from a seed across platforms, so
they do not go through :mod:`random` (whose algorithms may change) but
through this fixed 64-bit mixer.
"""
from __future__ import annotations

MASK64 = (1 << 64) - 1


class SplitMix64:
    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)

    def below(self, n: int) -> int:
        """Uniform integer in ``[0, n)`` (rejection sampling, unbiased)."""
        if n <= 0:
            raise ValueError("n must be positive")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            x = self.next()
            if x < limit:
                return x % n

    def shuffle(self, items: list) -> None:
        for i in range(len(items) - 1, 0, -1):
            j = self.below(i + 1)
            items[i], items[j] = items[j], items[i]

    def sample(self, n: int, k: int) -> list[int]:
        """``k`` distinct integers from ``[0, n)``, sorted (Floyd's algorithm)."""
        if k > n:
            raise ValueError("sample larger than population")
        chosen: set[int] = set()
        for j in range(n - k, n):
            t = self.below(j + 1)
            chosen.add(j if t in chosen else t)
        return sorted(chosen)


def derive_seed(seed: int, stream: int) -> int:
    """Independent child seed for a numbered sub-stream."""
    return SplitMix64(seed ^ ((stream * 0xD1B54A32D192ED03) & MASK64)).next()
