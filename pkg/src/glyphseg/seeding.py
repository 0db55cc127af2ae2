"""Deterministic seed derivation shared by sampling, training, and generation.

Per-item seeds are derived by hashing, never by iteration order, so results
are independent of scheduling and identical across processes.
"""

from __future__ import annotations

import hashlib

import numpy as np

_SEP = b"\x1f"


def stable_hash(*parts: object) -> int:
    """Map a tuple of ints/strings to a 64-bit seed, stable across processes."""
    digest = hashlib.sha256()
    for part in parts:
        digest.update(repr(part).encode("utf-8"))
        digest.update(_SEP)
    return int.from_bytes(digest.digest()[:8], "big")


def run_seed(base_seed: int, run_index: int) -> int:
    """Seed for evaluation run `run_index`; runs are numbered from 0."""
    return base_seed + run_index


def rng_from(*parts: object) -> np.random.Generator:
    return np.random.default_rng(stable_hash(*parts))
