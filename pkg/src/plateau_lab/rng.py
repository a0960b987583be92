"""Counter-based random streams.

Every random draw in a run is addressed by a path of integers, e.g.
``(run_seed, POLICY, update, slot)``. The path is hashed into a Philox key, so a
stream never depends on how many other streams were consumed before it. This
is what keeps slot ``i`` unchanged when the number of environments changes,
and what makes checkpoints tiny: the only RNG state to save is the counters.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

# Stream tags. Values are part of the on-disk determinism contract.
EPISODE = 1
POLICY = 2
SHUFFLE = 3
LEVEL = 4
EVAL = 5
INIT = 6
FILTER = 7
BUFFER_PICK = 8
QUAD = 9


def _key(path: tuple[int, ...]) -> np.ndarray:
    if not path:
        raise ValueError("stream path must be non-empty")
    if any(int(p) < 0 for p in path):
        raise ValueError(f"stream path entries must be non-negative, got {path}")
    digest = hashlib.blake2b(struct.pack(f"<{len(path)}Q", *(int(p) for p in path)), digest_size=16).digest()
    return np.frombuffer(digest, dtype="<u8").astype(np.uint64)


def stream(*path: int) -> np.random.Generator:
    """Independent generator addressed by ``path``."""
    return np.random.Generator(np.random.Philox(key=_key(tuple(path))))


def derive_seed(*path: int) -> int:
    """A 63-bit integer seed addressed by ``path`` (used for level and episode seeds)."""
    return int(_key(tuple(path))[0]) >> 1
