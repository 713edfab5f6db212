"""Named, reproducible random streams derived from a single run seed.

Stream names are hashed with crc32 (stable across processes and platforms,
unlike the builtin hash) so every consumer gets an independent generator
that depends only on (seed, name).
"""

from __future__ import annotations

import zlib

import numpy as np


def derived_rng(seed: int, name: str) -> np.random.Generator:
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([int(seed), key]))
