"""Numba switch.

Set ``MONOPROBE_DISABLE_NUMBA=1`` to run every hot kernel through its pure
numpy implementation. Both paths stay importable so the benchmark and the
tests can compare them side by side.
"""
import os

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

HAVE_NUMBA = numba is not None
USE_NUMBA = HAVE_NUMBA and os.environ.get("MONOPROBE_DISABLE_NUMBA", "").lower() not in (
    "1",
    "true",
    "yes",
)


def njit(fn):
    """Compile ``fn`` lazily with numba when it is available, else return it as is."""
    if not HAVE_NUMBA:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)
