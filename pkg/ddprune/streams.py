# ddprune/streams.py
"""Named random sub-streams derived from one root seed ("teacher.3", "distill.step.17", ...)."""
from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _name_key(name: str) -> int:
    return int.from_bytes(hashlib.blake2b(name.encode("utf-8"), digest_size=8).digest(), "little")


def seed_sequence(root_seed: int, name: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(root_seed) & _MASK64, _name_key(name)])


def generator(root_seed: int, name: str) -> np.random.Generator:
    """Independent generator for `name`; the same (root_seed, name) always yields the same draws."""
    return np.random.default_rng(seed_sequence(root_seed, name))


def derive_seed(root_seed: int, name: str) -> int:
    """A 63-bit integer seed for `name`, for places that store plain integer seeds."""
    return int(seed_sequence(root_seed, name).generate_state(1, dtype=np.uint64)[0]) >> 1
