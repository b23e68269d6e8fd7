"""xoshiro256++ generator seeded through splitmix64.

Every stochastic choice in the package (weight init, data synthesis, noise
draws) goes through :class:`Rng` so results are bit-reproducible across
platforms. The inner loops are compiled with numba; the algorithm is the
reference one from Blackman & Vigna.
"""

from __future__ import annotations

import hashlib
import math

import numpy as np
from numba import njit

_MASK = (1 << 64) - 1


def splitmix64(x: int) -> tuple[int, int]:
    """One splitmix64 step. Returns (new_state, output)."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return x, z ^ (z >> 31)


def derive_seed(seed: int, *keys) -> int:
    """Mix a base seed with string/int keys into a fresh 64-bit seed.

    Keys are hashed with blake2b so the result does not depend on Python's
    per-process string hashing.
    """
    state = seed & _MASK
    for key in keys:
        digest = hashlib.blake2b(str(key).encode("utf-8"), digest_size=8).digest()
        state ^= int.from_bytes(digest, "little")
        state, out = splitmix64(state)
        state = out
    _, out = splitmix64(state)
    return out


@njit(cache=True)
def _rotl(x, k):
    return (x << np.uint64(k)) | (x >> np.uint64(64 - k))


@njit(cache=True)
def _fill_u64(state, out):
    s0, s1, s2, s3 = state[0], state[1], state[2], state[3]
    for i in range(out.size):
        out[i] = _rotl(s0 + s3, 23) + s0
        t = s1 << np.uint64(17)
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
    state[0], state[1], state[2], state[3] = s0, s1, s2, s3


class Rng:
    """Deterministic stream of 64-bit words and derived variates."""

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK
        s = self.seed
        words = []
        for _ in range(4):
            s, out = splitmix64(s)
            words.append(out)
        self.state = np.array(words, dtype=np.uint64)

    def child(self, *keys) -> "Rng":
        """Independent stream keyed by ``keys`` (does not advance this one)."""
        return Rng(derive_seed(self.seed, *keys))

    def next_u64(self, n: int) -> np.ndarray:
        out = np.empty(int(n), dtype=np.uint64)
        if n:
            _fill_u64(self.state, out)
        return out

    def random(self, shape=()) -> np.ndarray:
        """Uniform doubles in [0, 1) with 53 random bits."""
        n = int(np.prod(shape)) if shape != () else 1
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        return u.reshape(shape) if shape != () else u[0]

    def normal(self, shape=(), dtype=np.float64) -> np.ndarray:
        """Standard normals by Box-Muller, both outputs of each pair used."""
        n = int(np.prod(shape)) if shape != () else 1
        m = (n + 1) // 2
        u = self.random((2 * m,))
        u1 = 1.0 - u[:m]  # (0, 1]
        u2 = u[m:]
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.empty(2 * m)
        z[0::2] = r * np.cos(2.0 * math.pi * u2)
        z[1::2] = r * np.sin(2.0 * math.pi * u2)
        z = z[:n].astype(dtype)
        return z.reshape(shape) if shape != () else z[0]

    def uniform(self, low: float, high: float, shape=()):
        return low + (high - low) * self.random(shape)

    def integers(self, low: int, high: int, shape=()):
        """Uniform integers in [low, high)."""
        span = int(high) - int(low)
        if span <= 0:
            raise ValueError(f"empty integer range [{low}, {high})")
        u = self.random(shape)
        v = np.minimum(np.floor(u * span).astype(np.int64), span - 1) + int(low)
        return int(v) if shape == () else v

    def permutation(self, n: int) -> np.ndarray:
        perm = np.arange(n)
        for i in range(n - 1, 0, -1):
            j = self.integers(0, i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def choice(self, seq):
        return seq[self.integers(0, len(seq))]
