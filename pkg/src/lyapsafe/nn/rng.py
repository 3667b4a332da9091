"""Named, counter-based random streams.

Each stream is a numpy ``Generator`` over a Philox bit generator keyed by
``(seed, stream_id)``. Philox is counter based, so a value depends only on
the key and the number of draws taken before it.
"""
from __future__ import annotations

import zlib

import numpy as np

_MASK64 = (1 << 64) - 1


def stream_id(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


class RngStream:
    """A reproducible random stream identified by ``(seed, stream id)``."""

    def __init__(self, seed: int, stream: int | str = 0):
        self.seed = int(seed) & _MASK64
        self.stream = stream_id(stream) if isinstance(stream, str) else int(stream)
        self.name = stream if isinstance(stream, str) else None
        key = np.array([self.seed, self.stream & _MASK64], dtype=np.uint64)
        self.generator = np.random.Generator(np.random.Philox(key=key))

    def child(self, name: str) -> "RngStream":
        """Independent stream derived from this one's identity and ``name``."""
        parent = self.name if self.name is not None else str(self.stream)
        return RngStream(self.seed, f"{parent}/{name}")

    # convenience pass-throughs
    def random(self, size=None):
        return self.generator.random(size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def choice(self, a, size=None, replace=True, p=None):
        return self.generator.choice(a, size=size, replace=replace, p=p)

    def permutation(self, x):
        return self.generator.permutation(x)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream={self.name or self.stream})"
