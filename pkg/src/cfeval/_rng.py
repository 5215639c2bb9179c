"""Named, counter-based random streams.

Every random quantity is drawn from a Philox stream keyed by the master seed
and a tuple of tags (stage name, domain, seed index ...). Adding a new stage or
method therefore never shifts the draws of another one.
"""

from __future__ import annotations

import zlib

import numpy as np


def _tag(t) -> int:
    if isinstance(t, (int, np.integer)):
        return int(t) & 0xFFFFFFFF
    return zlib.crc32(str(t).encode("utf-8"))


def stream(seed: int, *tags) -> np.random.Generator:
    seed = int(seed)
    words = [seed & 0xFFFFFFFF, (seed >> 32) & 0xFFFFFFFF] + [_tag(t) for t in tags]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))
