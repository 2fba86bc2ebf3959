"""Counter-based deterministic random numbers.

The generator is a stateless 64-bit mixer in the splitmix64 family: output
``t`` of a stream with seed ``s`` is ``mix64((s + t * GOLDEN) mod 2**64)``
where ``t`` counts from 1 and GOLDEN is the 64-bit golden-ratio constant.
Because each output depends only on (seed, position), any slice of a stream
can be regenerated without replaying the draws before it, and derived
streams (``split``) are pure functions of the parent seed and a tag list.
Identical seed and call sequence therefore produce identical bits on every
platform, independent of thread count.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX_A = 0xBF58476D1CE4E5B9
_MIX_B = 0x94D049BB133111EB
_SPLIT_SALT = 0x5851F42D4C957F2D
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def mix64(x: int) -> int:
    """Scalar splitmix64 finalizer on plain Python ints."""
    x &= _MASK64
    x = ((x ^ (x >> 30)) * _MIX_A) & _MASK64
    x = ((x ^ (x >> 27)) * _MIX_B) & _MASK64
    return (x ^ (x >> 31)) & _MASK64


def _mix64_array(x: np.ndarray) -> np.ndarray:
    # uint64 arithmetic wraps; silence the overflow warnings numpy emits.
    with np.errstate(over="ignore"):
        x = x ^ (x >> np.uint64(30))
        x = x * np.uint64(_MIX_A)
        x = x ^ (x >> np.uint64(27))
        x = x * np.uint64(_MIX_B)
        x = x ^ (x >> np.uint64(31))
    return x


def _hash_tag(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        return mix64(int(tag) ^ _SPLIT_SALT)
    if isinstance(tag, str):
        data = tag.encode("utf-8")
    elif isinstance(tag, bytes):
        data = tag
    else:
        raise TypeError(f"rng tags must be int, str or bytes, got {type(tag).__name__}")
    h = _FNV_OFFSET
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & _MASK64
    return h


class RngState:
    """A named position in a deterministic random stream.

    ``seed`` identifies the stream, ``counter`` the number of 64-bit words
    already consumed.  All drawing methods advance the counter; ``split``
    does not touch it.
    """

    __slots__ = ("seed", "counter")

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & _MASK64
        self.counter = int(counter)

    def __repr__(self):
        return f"RngState(seed=0x{self.seed:016x}, counter={self.counter})"

    def split(self, *tags) -> "RngState":
        """Derive an independent stream keyed by ``tags``.

        Derivation depends only on this stream's seed and the tag values,
        never on the counter, so substreams can be reproduced from anywhere.
        """
        h = mix64(self.seed ^ _SPLIT_SALT)
        for tag in tags:
            h = mix64(h ^ _hash_tag(tag))
        return RngState(h)

    # -- raw words ---------------------------------------------------------

    def next_words(self, n: int) -> np.ndarray:
        """The next ``n`` 64-bit words as a uint64 array."""
        idx = np.arange(1, n + 1, dtype=np.uint64) + np.uint64(self.counter & _MASK64)
        with np.errstate(over="ignore"):
            state = np.uint64(self.seed) + idx * np.uint64(_GOLDEN)
        self.counter += n
        return _mix64_array(state)

    def _next_word_int(self) -> int:
        self.counter += 1
        return mix64((self.seed + self.counter * _GOLDEN) & _MASK64)

    # -- distributions -----------------------------------------------------

    def uniform(self, shape=None, lo: float = 0.0, hi: float = 1.0):
        """Uniform floats in [lo, hi); scalar when shape is None.

        hi == lo is allowed and yields the constant lo (degenerate ranges
        show up in configs like a fixed-area crop policy).
        """
        if hi < lo:
            raise ValueError(f"inverted range: [{lo}, {hi})")
        n = 1 if shape is None else int(np.prod(shape, dtype=np.int64)) if shape != () else 1
        u = (self.next_words(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        out = lo + (hi - lo) * u
        if shape is None:
            return float(out[0])
        return out.reshape(shape)

    def normal(self, shape=None, mean: float = 0.0, std: float = 1.0):
        """Gaussian draws via Box-Muller; scalar when shape is None."""
        n = 1 if shape is None else int(np.prod(shape, dtype=np.int64)) if shape != () else 1
        m = (n + 1) // 2
        w = self.next_words(2 * m)
        # u1 shifted into (0, 1] so the log never sees zero.
        u1 = ((w[:m] >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53
        u2 = (w[m:] >> np.uint64(11)).astype(np.float64) * 2.0**-53
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2.0 * np.pi * u2), r * np.sin(2.0 * np.pi * u2)])[:n]
        out = mean + std * z
        if shape is None:
            return float(out[0])
        return out.reshape(shape)

    def truncated_normal(self, shape, std: float = 1.0, bound: float = 2.0) -> np.ndarray:
        """Gaussian truncated to [-bound, bound] sigma by resampling, then scaled."""
        out = self.normal(shape)
        bad = np.abs(out) > bound
        while bad.any():
            out[bad] = self.normal((int(bad.sum()),))
            bad = np.abs(out) > bound
        return out * std

    def randbelow(self, bound: int) -> int:
        """One integer in [0, bound) by the multiply-shift reduction."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        return (self._next_word_int() * bound) >> 64

    def integers(self, bound: int, shape=None):
        """Integers in [0, bound); scalar when shape is None."""
        if shape is None:
            return self.randbelow(bound)
        n = int(np.prod(shape, dtype=np.int64)) if shape != () else 1
        vals = [self.randbelow(bound) for _ in range(n)]
        return np.array(vals, dtype=np.int64).reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of 0..n-1."""
        arr = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.randbelow(i + 1)
            arr[i], arr[j] = arr[j], arr[i]
        return np.array(arr, dtype=np.int64)
