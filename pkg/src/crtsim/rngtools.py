"""Deterministic RNG substreams for reproducible parallel Monte Carlo.

Every random quantity in the package is drawn from a substream keyed by
(master seed, *labels). Substreams derived from the same key are
identical no matter which worker, in which order, draws them, which is
what makes results byte-identical across worker counts.
"""
from __future__ import annotations

import zlib

import numpy as np


def _key_word(key: int | str) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    if key < 0:
        raise ValueError(f"substream keys must be non-negative, got {key}")
    return int(key)


def substream(master_seed: int, *keys: int | str) -> np.random.Generator:
    """Return a Generator for the substream identified by the key tuple.

    String keys are hashed with crc32; integer keys are used directly and
    must be non-negative. The same (master_seed, keys) always yields the
    same stream.
    """
    if master_seed < 0:
        raise ValueError(f"master seed must be non-negative, got {master_seed}")
    spawn_key = tuple(_key_word(k) for k in keys)
    return np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=spawn_key))
