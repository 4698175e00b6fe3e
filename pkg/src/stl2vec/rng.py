"""Deterministic random substreams.

Every random draw in the package comes from a generator keyed by
``(master seed, purpose label, item index)``.  Generating item ``i`` never
depends on how many items were generated before it, so work can be split
across threads or processes without changing results.
"""
from __future__ import annotations

import hashlib
import os

import numpy as np

SEED_ENV = "STL2VEC_SEED"


def _label_key(label: str) -> int:
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def substream(seed: int, label: str, index: int = 0) -> np.random.Generator:
    """Return a PCG64 generator (128-bit state) for one (label, index) cell."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(_label_key(label), int(index)))
    return np.random.Generator(np.random.PCG64(ss))


def derive_seed(seed: int, label: str) -> int:
    """Derive a child master seed, e.g. for one repetition of an experiment."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(_label_key(label),))
    return int(ss.generate_state(2, dtype=np.uint64)[0] >> np.uint64(1))


def resolve_seed(seed: int | None, default: int = 0) -> int:
    if seed is not None:
        return int(seed)
    env = os.environ.get(SEED_ENV)
    if env:
        return int(env)
    return default
