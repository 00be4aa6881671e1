"""Splittable, counter-based random streams.

Each ``(seed, stream_id)`` pair maps to an independent Philox generator, so
weight init, data shuffling, channel noise and pilot generation never share
state and results do not depend on evaluation order.
"""
import zlib
from dataclasses import dataclass

import numpy as np

# reserved stream ids
INIT = 0
DATA = 1
CHANNEL = 2
PILOT = 3
EMULATOR = 4
PROBE = 5


@dataclass(frozen=True)
class RngStream:
    seed: int
    stream_id: int = 0

    def generator(self, *subkeys):
        """Fresh generator for this stream; extra ``subkeys`` derive child streams."""
        keys = tuple(zlib.crc32(k.encode()) if isinstance(k, str) else int(k) for k in subkeys)
        ss = np.random.SeedSequence(self.seed & 0xFFFFFFFFFFFFFFFF, spawn_key=(self.stream_id, *keys))
        return np.random.Generator(np.random.Philox(ss))

    def child(self, stream_id):
        return RngStream(self.seed, stream_id)


def truncated_normal(gen, shape, std, dtype):
    """Normal samples redrawn until within two standard deviations."""
    out = gen.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = gen.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(dtype)
