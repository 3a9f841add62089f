"""Named random streams derived from a single 64-bit seed."""

from __future__ import annotations

import zlib

import numpy as np


def stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Return an independent generator for the stream ``name`` under ``seed``.

    The same ``(seed, name, *extra)`` always yields the same generator state, and
    distinct names give statistically independent streams, so any one component
    (dataset, init, shuffling, attacks) can be reproduced without replaying the
    others.
    """
    key = (zlib.crc32(name.encode("utf-8")),) + tuple(int(e) for e in extra)
    return np.random.default_rng(np.random.SeedSequence(int(seed) & (2**64 - 1), spawn_key=key))
