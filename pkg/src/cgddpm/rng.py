"""Counter-based random streams.

Every random draw in the package comes from a Philox generator keyed by
(master seed, path of integers). Keys identify *what* the draw is for
(run, window, purpose, step), so the order in which draws happen never
changes their values.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

# stream purposes
START = 0
CHAIN = 1
REVERSE = 2
TRAIN = 3


class Streams:
    """A keyed family of generators.

    ``start_key``, when set, replaces ``key`` for START draws; it is used to
    give several runs the same initial noise while keeping later draws apart.
    """

    def __init__(self, seed: int, key: Sequence[int] = (), start_key: Sequence[int] | None = None):
        self.seed = int(seed) & (2**64 - 1)
        self.key = tuple(int(k) for k in key)
        self.start_key = None if start_key is None else tuple(int(k) for k in start_key)

    def child(self, *key: int) -> "Streams":
        start = None if self.start_key is None else self.start_key + tuple(key)
        return Streams(self.seed, self.key + tuple(key), start)

    def run(self, r: int, shared_start: bool = False) -> "Streams":
        """Stream for MC run ``r``; with ``shared_start`` the START draws ignore ``r``."""
        return Streams(self.seed, self.key + (int(r),), self.key if shared_start else None)

    def at(self, *key: int) -> np.random.Generator:
        base = self.start_key if (self.start_key is not None and key and key[0] == START) else self.key
        ss = np.random.SeedSequence(self.seed, spawn_key=base + tuple(int(k) for k in key))
        return np.random.Generator(np.random.Philox(ss))

    def __repr__(self) -> str:
        return f"Streams(seed={self.seed}, key={self.key})"


def as_stream_list(streams, batch: int) -> list[Streams]:
    if isinstance(streams, Streams):
        return [streams.child(b) for b in range(batch)] if batch > 1 else [streams]
    streams = list(streams)
    if len(streams) != batch:
        raise ValueError(f"need one stream per batch element ({batch}), got {len(streams)}")
    return streams


def randn(streams: list[Streams], key: tuple[int, ...], shape: tuple[int, ...], dtype=np.float32) -> np.ndarray:
    """Stack one standard-normal draw of ``shape`` per stream."""
    return np.stack([s.at(*key).standard_normal(shape) for s in streams]).astype(dtype)
