"""Deterministic randomness for the whole pipeline.

Everything that needs random numbers draws from a SplitMix64 stream.
Streams are derived from a single root seed plus a key path (record
index, purpose tag, ...) so any stage can be re-run in isolation and
produce identical output.

The vectorized draws exploit the fact that the SplitMix64 state
sequence is an arithmetic progression: output i equals
``mix(seed + (i+1)*GOLDEN)``, so a whole block of outputs is one
numpy expression and bit-identical to the sequential stream.
"""

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15

_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

# 2**-53, maps the top 53 bits of a u64 onto [0, 1)
_INV53 = 1.0 / (1 << 53)

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def mix64(z: int) -> int:
    """SplitMix64 finalizer: avalanche a 64-bit value."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * _MIX1) & MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & MASK64
    return z ^ (z >> 31)


def _fnv1a(text: str) -> int:
    h = _FNV_OFFSET
    for b in text.encode("utf-8"):
        h = ((h ^ b) * _FNV_PRIME) & MASK64
    return h


def derive_seed(root: int, *keys) -> int:
    """Derive a child seed from a root seed and a key path.

    Keys may be ints or strings; the derivation folds each key into the
    state with the SplitMix64 finalizer, so sibling streams are
    statistically independent.
    """
    state = root & MASK64
    for key in keys:
        if isinstance(key, str):
            k = _fnv1a(key)
        else:
            k = int(key) & MASK64
        state = mix64((state + GOLDEN) ^ k)
    return state


class SplitMix64:
    """A single SplitMix64 stream.

    Scalar draws (`next_u64`, `randrange`, `shuffle`) and vectorized
    draws (`u64_array`, `uniforms`, `gaussians`) consume the same
    underlying u64 sequence, so mixing them keeps determinism.
    """

    def __init__(self, seed: int):
        self._state = seed & MASK64

    def next_u64(self) -> int:
        self._state = (self._state + GOLDEN) & MASK64
        return mix64(self._state)

    def u64_array(self, n: int) -> np.ndarray:
        """Next n outputs as uint64, identical to n calls of next_u64()."""
        idx = np.arange(1, n + 1, dtype=np.uint64)
        z = np.uint64(self._state) + idx * np.uint64(GOLDEN)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
        z = z ^ (z >> np.uint64(31))
        self._state = (self._state + n * GOLDEN) & MASK64
        return z

    def uniform(self) -> float:
        """One double in [0, 1) from the top 53 bits."""
        return (self.next_u64() >> 11) * _INV53

    def uniforms(self, n: int) -> np.ndarray:
        """n doubles in [0, 1)."""
        return (self.u64_array(n) >> np.uint64(11)).astype(np.float64) * _INV53

    def gaussians(self, n: int) -> np.ndarray:
        """n standard normals via Box-Muller.

        Consumes 2*ceil(n/2) u64 draws: pairs (u1, u2) with u1 mapped to
        (0, 1] so the log is always finite.
        """
        m = (n + 1) // 2
        raw = self.u64_array(2 * m)
        u1 = ((raw[0::2] >> np.uint64(11)).astype(np.float64) + 1.0) * _INV53
        u2 = (raw[1::2] >> np.uint64(11)).astype(np.float64) * _INV53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        out = np.empty(2 * m)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:n]

    def randrange(self, n: int) -> int:
        """Unbiased integer in [0, n) by rejection."""
        if n <= 0:
            raise ValueError("randrange needs n >= 1")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % n

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randrange(i + 1)
            items[i], items[j] = items[j], items[i]

    def permutation(self, n: int) -> np.ndarray:
        idx = list(range(n))
        self.shuffle(idx)
        return np.asarray(idx, dtype=np.intp)
