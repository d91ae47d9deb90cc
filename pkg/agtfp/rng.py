"""Counter-based random substreams.

Every draw (bootstrap replicate, placebo permutation, ensemble pairing, CV fold
split) gets its own generator derived from ``(seed, *keys)``, so results never
depend on how work is scheduled across workers.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _key_int(key: int | str) -> int:
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError(f"substream keys must be nonnegative, got {key}")
        return int(key)
    digest = hashlib.sha256(str(key).encode()).digest()
    return int.from_bytes(digest[:8], "little")


def substream(seed: int, *keys: int | str) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(_key_int(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed: int, *keys: int | str) -> int:
    """A child seed, stable across platforms (used per sweep spec)."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(_key_int(k) for k in keys))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))
