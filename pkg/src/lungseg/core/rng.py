"""Seeded random streams.

All randomness (weight init, shuffles, splits, augmentation sampling) comes
from Philox-4x64 generators, a counter-based bit generator whose output is
identical across platforms for a given key.  Each purpose gets its own stream
derived from the run seed and a stream name, so adding draws to one stream
never perturbs another.
"""

from __future__ import annotations

import zlib

import numpy as np


def make_rng(seed: int, stream: str = "") -> np.random.Generator:
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(stream.encode("utf-8"))]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))
