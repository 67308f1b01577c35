"""Hierarchical seed derivation: every random source is keyed by (seed, stage, index)."""
import zlib

import numpy as np


def stage_key(stage: str) -> int:
    return zlib.crc32(stage.encode("utf-8"))


def rng_for(seed: int, stage: str, index: int = 0) -> np.random.Generator:
    if seed < 0 or index < 0:
        raise ValueError("seeds and indices must be non-negative")
    return np.random.default_rng(np.random.SeedSequence([int(seed), stage_key(stage), int(index)]))


def as_rng(rng) -> np.random.Generator:
    """Accept a Generator, an int seed, or None (seed 0)."""
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(0 if rng is None else rng)
