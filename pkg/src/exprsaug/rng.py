"""Deterministic random substreams.

Every random decision in a run is drawn from a named substream of one
master seed, so components (model init, shuffling, folds, downsampling,
synthetic data) can be re-seeded independently and results do not depend
on scheduling or call order between components.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _digest(seed: int, path: tuple) -> bytes:
    h = hashlib.sha256()
    h.update(str(int(seed)).encode("ascii"))
    for part in path:
        h.update(b"/")
        h.update(str(part).encode("utf-8"))
    return h.digest()


def substream(seed: int, *path) -> np.random.Generator:
    """Return a Generator for the substream named by `path` under `seed`.

    The same (seed, path) always yields an identically-seeded generator,
    independent of platform and of any other stream.
    """
    words = np.frombuffer(_digest(seed, path), dtype="<u4")
    return np.random.default_rng(np.random.SeedSequence(words.tolist()))


def derive_seed(seed: int, *path) -> int:
    """Derive a 64-bit unsigned child seed for the substream named by `path`."""
    return int.from_bytes(_digest(seed, path)[:8], "little")
