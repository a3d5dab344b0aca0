"""HDR environment maps from multi-exposure mirror and diffuse light probes."""

from __future__ import annotations

import os

__version__ = "0.1.0"


def set_threads(count: int | None = None) -> int:
    """Cap internal render parallelism; defaults to ``$PROBEFUSE_THREADS`` if set.

    Returns the thread count in effect.
    """
    import numba

    if count is None:
        env = os.environ.get("PROBEFUSE_THREADS")
        if not env:
            return numba.get_num_threads()
        try:
            count = int(env)
        except ValueError:
            raise ValueError(f"PROBEFUSE_THREADS must be an integer, got {env!r}") from None
    count = max(1, min(int(count), numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(count)
    return count
