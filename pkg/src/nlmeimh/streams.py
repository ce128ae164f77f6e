"""Named, counter-style random streams derived from one master seed."""

import zlib

import numpy as np


def _key(k):
    if isinstance(k, (int, np.integer)) and k >= 0:
        return int(k)
    return zlib.crc32(str(k).encode())


def stream(seed, *keys) -> np.random.Generator:
    """Independent generator for ``(seed, *keys)``; same inputs, same stream."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([_key(seed), *map(_key, keys)])))
