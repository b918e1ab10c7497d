"""Counter-based random streams.

An :class:`RngState` is a value: drawing from it returns the draws together
with the advanced state, and the original is left untouched. Draws come from
Philox4x32-10 keyed by the 64-bit seed; the position counts 128-bit counter
blocks already consumed, so any ``(seed, position)`` pair can be replayed or
handed to another worker without coordination.
"""

from dataclasses import dataclass
import zlib

import numpy as np

_MASK64 = (1 << 64) - 1


def splitmix64(x):
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


@dataclass(frozen=True)
class RngState:
    seed: int
    position: int = 0

    def __post_init__(self):
        if not 0 <= self.seed <= _MASK64:
            raise ValueError(f"seed must fit in 64 unsigned bits, got {self.seed}")
        if not 0 <= self.position <= _MASK64:
            raise ValueError(f"position must fit in 64 unsigned bits, got {self.position}")

    def substream(self, name):
        """Independent stream derived from this seed and a label.

        Derivation ignores ``position`` so a named stream is the same no matter
        how much the parent has been consumed.
        """
        if isinstance(name, int):
            tag = splitmix64(name & _MASK64)
        else:
            tag = splitmix64(zlib.crc32(str(name).encode("utf-8")))
        return RngState(splitmix64(self.seed ^ tag))

    def advance(self, nblocks):
        return RngState(self.seed, (self.position + nblocks) & _MASK64)


def _blocks(rng, nblocks):
    from . import _impl

    words = _impl().philox4x32(rng.seed, rng.position, nblocks)
    return words, rng.advance(nblocks)


def random_words(rng, n):
    """``n`` raw 32-bit words and the advanced state."""
    nblocks = (n + 3) // 4
    words, rng = _blocks(rng, nblocks)
    return words[:n], rng


def uniforms(rng, n):
    """``n`` float64 draws strictly inside (0, 1)."""
    words, rng = random_words(rng, n)
    return (words.astype(np.float64) + 0.5) * (1.0 / 4294967296.0), rng


def integers(rng, n, high):
    """``n`` integers uniform on ``[0, high)``."""
    if high <= 0:
        raise ValueError("high must be positive")
    u, rng = uniforms(rng, n)
    return np.minimum((u * high).astype(np.int64), high - 1), rng


def normals(rng, n):
    """``n`` standard normal float64 draws by Box-Muller on consecutive uniform pairs."""
    m = n + (n & 1)
    u, rng = uniforms(rng, m)
    u1 = u[0::2]
    u2 = u[1::2]
    r = np.sqrt(-2.0 * np.log(u1))
    theta = 2.0 * np.pi * u2
    z = np.empty(m, dtype=np.float64)
    z[0::2] = r * np.cos(theta)
    z[1::2] = r * np.sin(theta)
    return z[:n], rng


def seeded_normal(rng, shape, dtype=np.float32):
    """Standard normal tensor of ``shape`` and the advanced state."""
    shape = tuple(int(s) for s in shape) if np.iterable(shape) else (int(shape),)
    n = int(np.prod(shape, dtype=np.int64))
    z, rng = normals(rng, n)
    return z.reshape(shape).astype(dtype), rng
