"""Seeded random streams.

Every random draw in the package comes from a numpy PCG64 generator built as

    SeedSequence(entropy=master_seed, spawn_key=(key_1, key_2, ...))

where each key is either a non-negative integer or a purpose string mapped through
CRC-32. Two streams with different key paths are statistically independent, and a
stream depends only on (master_seed, keys), so adding a new consumer never shifts
the draws of an existing one.
"""

import zlib
from typing import Union

import numpy as np

Key = Union[int, str]

_MASK64 = (1 << 64) - 1


def _key_to_int(key: Key) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    if isinstance(key, (bool,)) or not isinstance(key, (int, np.integer)):
        raise TypeError(f"stream key must be int or str, got {type(key).__name__}")
    return int(key) & _MASK64


def seed_sequence(seed: int, *keys: Key) -> np.random.SeedSequence:
    """Return the SeedSequence for a master seed and key path."""
    return np.random.SeedSequence(
        entropy=int(seed) & _MASK64,
        spawn_key=tuple(_key_to_int(k) for k in keys),
    )


def substream(seed: int, *keys: Key) -> np.random.Generator:
    """Return an independent Generator for `keys` under `seed`."""
    return np.random.Generator(np.random.PCG64(seed_sequence(seed, *keys)))


def derive_seed(seed: int, *keys: Key) -> int:
    """Derive a 63-bit integer seed for nested seeding (e.g. a LatentCode seed)."""
    state = seed_sequence(seed, *keys).generate_state(2, dtype=np.uint32)
    return ((int(state[0]) << 32) | int(state[1])) & ((1 << 63) - 1)
