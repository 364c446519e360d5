"""Named, reproducible random substreams derived from one seed.

Every source of randomness (gradient draws, subsampling, Gibbs updates,
posterior sampling, scoring) pulls from its own generator keyed by name, so
adding draws to one consumer never shifts another and reruns with the same
seed are bit-identical.
"""

from __future__ import annotations

import zlib

import numpy as np


def substream(seed: int, name: str) -> np.random.Generator:
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(
        np.random.SeedSequence(entropy=int(seed), spawn_key=(key,))
    )
