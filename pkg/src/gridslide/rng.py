"""Named random sub-streams derived from one experiment seed.

Each consumer asks for ``stream(seed, "crop")`` and friends, so adding a new
consumer never shifts the draws seen by existing ones.
"""
from __future__ import annotations

import zlib

import numpy as np


def _key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def stream(seed: int, *names: str | int) -> np.random.Generator:
    keys = [_key(n) if isinstance(n, str) else int(n) for n in names]
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(keys)))
