"""Numba dispatch switch.

Set ``PRLAB_NUMBA=0`` to force the pure-numpy kernels (also used automatically
when numba is not importable).
"""
import os

_FLAG = os.environ.get("PRLAB_NUMBA", "1").strip().lower()

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

USE_NUMBA = numba is not None and _FLAG not in ("0", "false", "no", "off")


def njit(func):
    """``numba.njit(cache=True)`` when numba is importable, identity otherwise."""
    if numba is None:  # pragma: no cover
        return func
    return numba.njit(cache=True)(func)
