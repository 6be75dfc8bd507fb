"""Seeded random streams.

Every random draw in the package comes from numpy's ``PCG64`` bit generator
(``numpy.random.Generator``).  Named substreams are derived from a root seed
with ``SeedSequence(root, spawn_key=(crc32(name),))`` so that e.g. the data
stream does not shift when the sketch stream is consumed differently.
"""

from __future__ import annotations

import zlib

import numpy as np

STREAMS = ("data", "init", "sketch", "dropout", "batches", "basis")


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Return an independent generator for ``name`` under root ``seed``."""
    key = (zlib.crc32(name.encode("utf-8")),) + tuple(int(e) for e in extra)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=key)))


def generator(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed)))
