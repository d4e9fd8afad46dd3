"""Named random streams split off a single root seed."""

from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError(f"stream keys must be non-negative, got {part}")
        return int(part)
    return zlib.crc32(str(part).encode("utf-8"))


def derive_rng(root_seed: int, *path) -> np.random.Generator:
    """Independent generator for the stream ``path`` under ``root_seed``.

    ``derive_rng(7, "data")`` and ``derive_rng(7, "train", 3)`` never share
    state, and each is reproducible on its own.
    """
    entropy = [_key(root_seed)] + [_key(p) for p in path]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def rng_from_state(state: dict) -> np.random.Generator:
    bg = np.random.PCG64()
    bg.state = state
    return np.random.Generator(bg)
