"""Named, seedable random streams.

Every stochastic event draws from its own ``numpy.random.Generator`` built from
``SeedSequence([master_seed, purpose_code, *keys])``. ``purpose_code`` is the
CRC-32 of the purpose name, so streams are stable across processes, platforms
and scheduling order. Gaussian draws use numpy's ziggurat sampler; other
implementations can match moments but not bits.
"""

from __future__ import annotations

import zlib

import numpy as np

# purposes used by the library; listed here so collisions are easy to spot
DATA = "data"
SIZES = "sizes"
SPLIT = "split"
SAMPLE = "sample"
STRAGGLE = "straggle"
LOCAL = "local"
NOISE = "noise"
INIT = "init"
PROBE = "probe"


def purpose_code(purpose: str) -> int:
    return zlib.crc32(purpose.encode("utf-8"))


def stream(seed: int, purpose: str, *keys: int) -> np.random.Generator:
    """Independent generator for ``(seed, purpose, *keys)``."""
    if seed < 0 or any(k < 0 for k in keys):
        raise ValueError("seeds and stream keys must be non-negative")
    entropy = [int(seed), purpose_code(purpose), *(int(k) for k in keys)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
