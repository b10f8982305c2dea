"""Labeled seed derivation.

One global seed fans out to independent per-subsystem seeds, so changing
how one subsystem consumes randomness never shifts another's stream.
"""

import hashlib

import numpy as np


def derive_seed(seed, *labels):
    """Return a 64-bit seed derived from ``seed`` and a label path."""
    key = ":".join([str(int(seed))] + [str(label) for label in labels])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def rng(seed, *labels):
    return np.random.default_rng(derive_seed(seed, *labels))
