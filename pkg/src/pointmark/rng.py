"""Deterministic seed derivation.

Every stochastic step in the pipeline draws from a generator keyed by a
base seed plus a context path (strings and integers), so parallel and
serial execution of per-sample work produce identical results.
"""

import hashlib

import numpy as np


def seed_for(*parts):
    """Derive a stable 64-bit seed from a mixed tuple of ints/strings."""
    h = hashlib.sha256()
    for part in parts:
        if isinstance(part, str):
            h.update(b"s" + part.encode("utf-8"))
        elif isinstance(part, (int, np.integer)):
            h.update(b"i" + int(part).to_bytes(16, "little", signed=True))
        else:
            raise TypeError(f"seed parts must be int or str, got {type(part)!r}")
        h.update(b"\x00")
    return int.from_bytes(h.digest()[:8], "little")


def rng_for(*parts):
    """A fresh numpy Generator keyed by the given context path."""
    return np.random.default_rng(np.random.SeedSequence(seed_for(*parts)))
