"""Seed derivation.

All randomness is drawn from ``numpy`` generators keyed by ``(seed, *keys)``
through :class:`numpy.random.SeedSequence` spawn keys, so a stream depends only
on its key and never on scheduling.
"""

from enum import IntEnum

import numpy as np


class Stream(IntEnum):
    MODEL = 1
    CALIB_U = 2
    TEST_U = 3
    FOLDS = 4
    N_BOOTSTRAPS = 5
    TUNING_SPLIT = 6
    TUNING_U = 7
    CALIB_SPLIT = 8


def rng_for(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys)))


def derive_seed(seed: int, *keys: int) -> int:
    """Return a 63-bit child seed for the stream ``(seed, *keys)``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


def uniforms(seed: int, stream: Stream, n: int) -> np.ndarray:
    """``n`` draws from U[0, 1); element ``j`` is keyed by index ``j``.

    A prefix of a longer draw equals a shorter draw, so chunked consumers can
    slice one vector.
    """
    return rng_for(seed, stream).random(n)
