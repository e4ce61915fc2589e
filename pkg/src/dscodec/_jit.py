"""Numba switch for the hot kernels.

Set ``DSCODEC_DISABLE_NUMBA=1`` to run the pure-numpy fallbacks instead of
the compiled loops (useful when debugging or when numba is unavailable).
"""
import os

_DISABLED = os.environ.get("DSCODEC_DISABLE_NUMBA", "").lower() in ("1", "true", "yes")

try:
    import numba

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and not _DISABLED


def njit(func):
    """Compile ``func`` in nopython mode when numba is available, else return it as is."""
    if HAS_NUMBA:
        return numba.njit(cache=True)(func)
    return func
