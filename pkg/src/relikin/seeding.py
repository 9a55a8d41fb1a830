"""Named random sub-streams fanned out from one integer seed.

``stream(seed, "dropout", 3)`` always yields the same generator, and
streams with different names are statistically independent (numpy
``SeedSequence`` spawn keys).
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    return zlib.crc32(str(part).encode("utf-8"))


def stream(seed: int, *names) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(_key(n) for n in names))
    return np.random.Generator(np.random.PCG64(ss))


def derive(seed: int, *names) -> int:
    """A derived integer seed, for APIs that take ints rather than generators."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(_key(n) for n in names))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> 1)
