"""Single source of randomness for the package.

Every consumer asks for its own named stream so that, e.g., parameter
initialization and minibatch shuffling never draw from the same generator.
Streams are Philox (counter-based) generators keyed by the user seed, a
stable hash of the stream name and optional integer indices.
"""

from __future__ import annotations

import zlib

import numpy as np


def stream(seed: int, name: str, *index: int) -> np.random.Generator:
    key = [int(seed) % (1 << 64), zlib.crc32(name.encode("utf-8"))]
    key.extend(int(i) for i in index)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))
