"""Seeded, splittable random streams.

Every stream is a PCG64 generator seeded through ``numpy.random.SeedSequence``
with a spawn key derived from a path of purpose labels. The same
``(seed, path)`` pair always yields the same draws on every platform, and two
different paths never share state, so consuming one purpose (say dropout)
never shifts another (say augmentation).
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (bool, np.bool_)):
        raise TypeError("stream keys must be str or int")
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError("integer stream keys must be non-negative")
        return int(part)
    if isinstance(part, str):
        # offset keeps string keys disjoint from small integer keys
        return (1 << 32) + zlib.crc32(part.encode("utf-8"))
    raise TypeError(f"unsupported stream key {part!r}")


class RngStream:
    """A deterministic random stream identified by ``seed`` and a key path."""

    __slots__ = ("seed", "path", "_gen")

    def __init__(self, seed: int, path: tuple = ()):
        if not 0 <= int(seed) < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        self.seed = int(seed)
        self.path = tuple(path)
        self._gen = None

    def substream(self, *parts) -> "RngStream":
        """Return an independent stream for a sub-purpose (fresh state)."""
        return RngStream(self.seed, self.path + tuple(parts))

    @property
    def generator(self) -> np.random.Generator:
        if self._gen is None:
            ss = np.random.SeedSequence(self.seed, spawn_key=tuple(_key(p) for p in self.path))
            self._gen = np.random.Generator(np.random.PCG64(ss))
        return self._gen

    # thin conveniences over the underlying generator
    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size=size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size=size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size=size)

    def random(self, size=None):
        return self.generator.random(size)

    def permutation(self, n):
        return self.generator.permutation(n)

    def choice(self, a, size=None, replace=True):
        return self.generator.choice(a, size=size, replace=replace)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, path={self.path!r})"
