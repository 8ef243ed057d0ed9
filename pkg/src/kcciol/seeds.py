"""Deterministic seed derivation.

All randomness in the package flows from a single master seed. Child
streams are derived as ``SeedSequence([master, part0, part1, ...])`` where
string path parts are hashed with crc32 (stable across processes, unlike
Python's salted ``hash``). The same (master, path) always yields the same
stream on any platform.
"""

from __future__ import annotations

import zlib

import numpy as np

from .errors import UsageError


def _as_entropy(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    part = int(part)
    if part < 0:
        raise UsageError("seed path components must be non-negative integers")
    return part


def derive(master_seed, *path) -> np.random.SeedSequence:
    """Child SeedSequence for (master, *path)."""
    if isinstance(master_seed, np.random.SeedSequence):
        entropy = list(master_seed.entropy if isinstance(master_seed.entropy, (list, tuple)) else [master_seed.entropy])
    else:
        entropy = [_as_entropy(master_seed)]
    entropy.extend(_as_entropy(p) for p in path)
    return np.random.SeedSequence(entropy)


def rng(master_seed, *path) -> np.random.Generator:
    """PCG64 generator for (master, *path)."""
    return np.random.Generator(np.random.PCG64(derive(master_seed, *path)))
