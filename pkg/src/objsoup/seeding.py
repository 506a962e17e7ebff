"""Named, reproducible random streams derived from a single master seed."""
from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode())
    return int(part)


def stream(seed: int, *parts) -> np.random.Generator:
    """Generator for ``(seed, *parts)``; distinct parts give independent streams."""
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *map(_key, parts)]))
