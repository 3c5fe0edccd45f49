"""Counter-based, splittable random streams.

A stream is identified by ``(seed, path)``. Its 64-bit key is obtained by
hashing the seed and every path element in turn, so child streams can be
derived without consuming state. Uniform variates are a pure function of
``(key, counter)``; batches of rows can therefore be drawn in any chunking
or thread layout and still produce the same bits.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_MASK = (1 << 64) - 1
_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_CHILD = np.uint64(0xD1B54A32D192ED03)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)

# counters inside one row stream are laid out as purpose | draw | item
ITEM_STRIDE = 1 << 20
PURPOSE_STRIDE = 1 << 44


def mix64(z: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer applied elementwise to a uint64 array."""
    z = np.asarray(z, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
        return z ^ (z >> np.uint64(31))


def _child(keys: np.ndarray, index: np.ndarray) -> np.ndarray:
    index = np.asarray(index).astype(np.uint64)
    with np.errstate(over="ignore"):
        return mix64(keys ^ mix64((index + np.uint64(1)) * _CHILD))


def child_keys(key: int | np.ndarray, indices) -> np.ndarray:
    """Keys of ``derive(stream, i)`` for every ``i`` in ``indices`` (vectorized)."""
    keys = np.asarray(key, dtype=np.uint64)
    return _child(keys, np.asarray(indices, dtype=np.int64))


def counter_uniform(keys, counters) -> np.ndarray:
    """Uniform(0, 1) variates, open at both ends, indexed by ``(key, counter)``.

    ``keys`` and ``counters`` broadcast against each other.
    """
    keys = np.asarray(keys, dtype=np.uint64)
    counters = np.asarray(counters).astype(np.uint64)
    with np.errstate(over="ignore"):
        bits = mix64(mix64(keys + (counters + np.uint64(1)) * _GAMMA) ^ keys)
    return ((bits >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53


@dataclass(frozen=True)
class RandomStream:
    """Seedable, splittable random stream.

    Identical ``(seed, path)`` pairs always reproduce the same sequence, and
    ``derive(i)`` / ``derive(j)`` give independent children for ``i != j``.
    """

    seed: int
    path: tuple[int, ...] = field(default=())

    def __post_init__(self):
        if not 0 <= int(self.seed) <= _MASK:
            raise ValueError(f"seed must fit in 64 bits, got {self.seed}")
        object.__setattr__(self, "seed", int(self.seed))
        object.__setattr__(self, "path", tuple(int(i) for i in self.path))

    @property
    def key(self) -> int:
        with np.errstate(over="ignore"):
            k = mix64(np.array([self.seed], dtype=np.uint64) + _GAMMA)
        for i in self.path:
            k = _child(k, np.array([i]))
        return int(k[0])

    def derive(self, index: int) -> "RandomStream":
        if index < 0:
            raise ValueError("stream index must be nonnegative")
        return RandomStream(self.seed, self.path + (int(index),))

    def row_keys(self, indices) -> np.ndarray:
        """Keys of the child streams ``derive(i)`` for many ``i`` at once."""
        return child_keys(self.key, indices)

    def uniform(self, size: int, offset: int = 0) -> np.ndarray:
        return counter_uniform(self.key, np.arange(offset, offset + size))

    def generator(self) -> np.random.Generator:
        """A numpy Generator keyed by this stream (Philox, counter-based)."""
        return np.random.Generator(np.random.Philox(key=self.key))


def derive(stream: RandomStream, index: int) -> RandomStream:
    return stream.derive(index)
