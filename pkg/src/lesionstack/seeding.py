"""Deterministic seed derivation.

Every random stream in the pipeline is seeded from the master seed and a
path of keys, e.g. ``("train", "composite", "96x96x3", 2)``. The mixing
function is SHA-256 over the UTF-8 text ``master|key1|key2|...`` truncated
to 63 bits, so a partial rerun draws exactly what the full run drew.
"""

from __future__ import annotations

import hashlib

import numpy as np

_SEED_BITS = 63


def derive_seed(master_seed: int, *keys: object) -> int:
    """Mix a master seed with a key path into a 63-bit seed."""
    text = "|".join([str(int(master_seed)), *(str(k) for k in keys)])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") >> (64 - _SEED_BITS)


def make_rng(master_seed: int, *keys: object) -> np.random.Generator:
    """A PCG64 generator seeded by :func:`derive_seed`."""
    return np.random.default_rng(derive_seed(master_seed, *keys))
