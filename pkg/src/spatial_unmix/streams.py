"""Counter-based random streams.

Every random draw in the package is addressed by ``(seed, index, tag)``:
the seed becomes the Philox key and ``(tag, index)`` the upper counter
words.  A sampler step draws one block of variates for all pixels, and
pixel ``p`` always reads position ``p`` of that block, so results do not
depend on how the pixel work is later split across threads, and a chain
resumed from a checkpoint replays exactly.
"""

from __future__ import annotations

from enum import IntEnum

import numpy as np

_MASK64 = (1 << 64) - 1


class Tag(IntEnum):
    FIELD_INIT = 1
    FIELD_SWEEP = 2
    LABELS = 3
    COEFFS = 4
    NOISE = 5
    MEANS = 6
    VARIANCES = 7
    GLOBAL = 8
    SCENE_ABUNDANCES = 9
    SCENE_NOISE = 10
    ENDMEMBERS = 11
    CHAIN_INIT = 12


def stream(seed: int, index: int, tag: int) -> np.random.Generator:
    """Independent generator for step ``tag`` at iteration ``index``."""
    seed = int(seed)
    key = [seed & _MASK64, (seed >> 64) & _MASK64]
    counter = [0, 0, int(tag) & _MASK64, int(index) & _MASK64]
    return np.random.Generator(np.random.Philox(key=key, counter=counter))


def inverse_gamma(rng: np.random.Generator, shape, scale, size=None):
    """Draw from IG(shape, scale), density proportional to x^-(shape+1) exp(-scale/x)."""
    return scale / rng.gamma(shape, 1.0, size=size)
