"""Deterministic RNG derivation from a single root seed.

Every random choice in the package draws from a Generator obtained via
child_rng(root_seed, *labels); the labels make streams independent and
stable across runs and platforms.
"""

from __future__ import annotations

import hashlib

import numpy as np


def child_seed(seed: int, *labels) -> int:
    """Derive a child seed from a root seed and a label path.

    Uses sha256 so the mapping is stable across Python versions
    (builtin hash() is salted per process).
    """
    h = hashlib.sha256()
    h.update(str(int(seed)).encode())
    for label in labels:
        h.update(b"/")
        h.update(str(label).encode())
    return int.from_bytes(h.digest()[:8], "little")


def child_rng(seed: int, *labels) -> np.random.Generator:
    return np.random.default_rng(child_seed(seed, *labels))
