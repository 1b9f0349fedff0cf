"""Named random streams derived from one root seed.

``stream(seed, "patch", 3, "placements")`` always yields the same generator,
independent of which other streams were created or in what order.
"""
from __future__ import annotations

import zlib

import numpy as np


def stream(seed: int, *names) -> np.random.Generator:
    key = tuple(zlib.crc32(str(n).encode("utf-8")) for n in names)
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=key))
