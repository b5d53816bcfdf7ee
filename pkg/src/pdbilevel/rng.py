"""Deterministic random numbers reproducible across platforms.

The generator is xoshiro256** seeded through SplitMix64, using the
published reference constants of both algorithms, so any conforming
implementation in any language produces the same stream.  Gaussian
variates come from Box-Muller applied to consecutive uniform pairs;
even output indices take the cosine branch, odd indices the sine
branch of the same pair.
"""

import math

import numpy as np

_MASK64 = (1 << 64) - 1


def _splitmix64(state):
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


def _rotl(x, k):
    return ((x << k) | (x >> (64 - k))) & _MASK64


class Xoshiro256StarStar:
    """xoshiro256** stream with SplitMix64 state initialization."""

    def __init__(self, seed):
        s = int(seed) & _MASK64
        state = []
        for _ in range(4):
            s, out = _splitmix64(s)
            state.append(out)
        self._s = state

    def next_raw(self):
        """Next raw 64-bit output."""
        s0, s1, s2, s3 = self._s
        result = (_rotl((s1 * 5) & _MASK64, 7) * 9) & _MASK64
        t = (s1 << 17) & _MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return result

    def uniform(self, n):
        """n doubles in [0, 1), using the top 53 bits of each output."""
        out = np.empty(n, dtype=np.float64)
        for i in range(n):
            out[i] = (self.next_raw() >> 11) * 2.0**-53
        return out

    def uniform_open(self, n):
        """n doubles in (0, 1], safe as log arguments."""
        out = np.empty(n, dtype=np.float64)
        for i in range(n):
            out[i] = ((self.next_raw() >> 11) + 1) * 2.0**-53
        return out

    def gaussians(self, n, sigma=1.0):
        """n N(0, sigma^2) variates via Box-Muller (even=cos, odd=sin)."""
        pairs = (n + 1) // 2
        out = np.empty(2 * pairs, dtype=np.float64)
        for k in range(pairs):
            u1 = ((self.next_raw() >> 11) + 1) * 2.0**-53
            u2 = (self.next_raw() >> 11) * 2.0**-53
            r = math.sqrt(-2.0 * math.log(u1))
            out[2 * k] = r * math.cos(2.0 * math.pi * u2)
            out[2 * k + 1] = r * math.sin(2.0 * math.pi * u2)
        return sigma * out[:n]

    def standard_normal(self, shape):
        """Gaussian array of the given shape."""
        shape = tuple(shape)
        n = 1
        for d in shape:
            n *= d
        return self.gaussians(n).reshape(shape)
