import logging
import warnings
from contextlib import contextmanager

import numba
from numba.core.errors import NumbaWarning

logger = logging.getLogger(__name__)

# numba falls back to another threading layer on old TBB builds; the notice is noise
warnings.filterwarnings("ignore", message="The TBB threading layer", category=NumbaWarning)


def max_threads() -> int:
    return numba.config.NUMBA_NUM_THREADS


def resolve_threads(threads: int | None) -> int:
    """Map a user thread request onto the numba pool (``None``/``<=0`` = all)."""
    limit = max_threads()
    if threads is None or threads <= 0:
        return limit
    if threads > limit:
        logger.warning("requested %d threads, numba pool has %d; using %d", threads, limit, limit)
        return limit
    return threads


@contextmanager
def thread_limit(threads: int | None):
    previous = numba.get_num_threads()
    numba.set_num_threads(resolve_threads(threads))
    try:
        yield
    finally:
        numba.set_num_threads(previous)
