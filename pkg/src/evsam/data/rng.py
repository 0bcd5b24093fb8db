"""Counter-based random streams.

All randomness in the package comes from numpy's Philox4x64-10 bit generator
(Salmon et al., "Parallel random numbers: as easy as 1, 2, 3"). A stream is
identified by ``(seed, stream)``; the 128-bit Philox key is
``seed | stream << 64``, and the counter starts at zero. Any Philox4x64-10
implementation given the same key reproduces the raw 64-bit words exactly.
Named streams hash their name with CRC-32 so the mapping is stable across
processes and platforms.
"""
from __future__ import annotations

import zlib

import numpy as np

_MASK64 = (1 << 64) - 1


def stream_id(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def philox(seed: int, stream: int | str = 0) -> np.random.Generator:
    if isinstance(stream, str):
        stream = stream_id(stream)
    key = (int(seed) & _MASK64) | ((int(stream) & _MASK64) << 64)
    return np.random.Generator(np.random.Philox(key=key))
