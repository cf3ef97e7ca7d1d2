"""Seedable xoshiro256++ generator with splitmix64 seeding.

The bit stream is identical on every platform and for both kernel
backends; floats are built from the top 53 bits of each output.
"""

import numpy as np

from newtonop import kernels

_MASK64 = 0xFFFFFFFFFFFFFFFF
_TWO_M53 = 2.0 ** -53


def splitmix64(state):
    """One splitmix64 step; returns (new_state, output) as Python ints."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


class Rng:
    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        s = self.seed
        words = []
        for _ in range(4):
            s, z = splitmix64(s)
            words.append(z)
        self.state = np.array(words, dtype=np.uint64)

    def substream(self, index: int) -> "Rng":
        """Independent generator for item ``index`` (seed xor index, re-expanded)."""
        return Rng(self.seed ^ (int(index) & _MASK64))

    def next_u64(self, count: int) -> np.ndarray:
        return kernels.xoshiro_fill(self.state, int(count))

    def uniform(self, count: int) -> np.ndarray:
        """Doubles in [0, 1) with 53 random mantissa bits."""
        return (self.next_u64(count) >> np.uint64(11)).astype(np.float64) * _TWO_M53

    def uniform_range(self, lo: float, hi: float, count: int) -> np.ndarray:
        return lo + (hi - lo) * self.uniform(count)

    def normal(self, count: int) -> np.ndarray:
        """Standard normals by Box-Muller on consecutive uniform pairs (cos then sin)."""
        pairs = (count + 1) // 2
        u = self.uniform(2 * pairs).reshape(pairs, 2)
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        ang = 2.0 * np.pi * u[:, 1]
        z = np.empty((pairs, 2))
        z[:, 0] = r * np.cos(ang)
        z[:, 1] = r * np.sin(ang)
        return z.ravel()[:count]
