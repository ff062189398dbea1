"""Deterministic sub-seed derivation for independent RNG streams."""

import hashlib

import numpy as np


def subseed(seed: int, *parts) -> int:
    """Derive a 64-bit seed from a base seed and a tag tuple.

    Stable across runs and platforms; distinct tag tuples give
    independent streams.
    """
    key = repr((int(seed),) + parts).encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little")


def rng_for(seed: int, *parts) -> np.random.Generator:
    return np.random.default_rng(subseed(seed, *parts))
