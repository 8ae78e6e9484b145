"""Kernel backend selection.

Hot loops are written once as plain Python over numpy arrays and compiled
with numba when it is importable and not disabled.  Set
``SUPERNAS_BACKEND=numpy`` to force the pure-numpy path (useful for
debugging and for the kernel benchmark).
"""

import os
import warnings

_requested = os.environ.get("SUPERNAS_BACKEND", "numba").strip().lower()
if _requested not in ("numba", "numpy"):
    warnings.warn(f"unknown SUPERNAS_BACKEND={_requested!r}, using numba")
    _requested = "numba"

try:
    if _requested == "numpy":
        raise ImportError
    from numba import njit as _njit

    HAS_NUMBA = True
except ImportError:
    HAS_NUMBA = False

BACKEND = "numba" if HAS_NUMBA else "numpy"


def njit(*args, **kwargs):
    """``numba.njit`` when the numba backend is active, otherwise a no-op."""
    if HAS_NUMBA:
        kwargs.setdefault("cache", True)
        kwargs.setdefault("nogil", True)
        return _njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda f: f
