"""Numba switch.

Hot kernels are written twice: a loop form compiled with numba and a
vectorised numpy form. ``FLEXMPC_DISABLE_JIT=1`` (or a missing numba) selects
the numpy path for the whole process.
"""
import os

_FLAG = os.environ.get("FLEXMPC_DISABLE_JIT", "").strip().lower()

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

USE_NUMBA = numba is not None and _FLAG not in ("1", "true", "yes", "on")


def njit(func):
    """``numba.njit(cache=True)`` when available, identity otherwise."""
    if numba is None:
        return func
    return numba.njit(cache=True)(func)


def pick(jit_impl, numpy_impl):
    return jit_impl if USE_NUMBA else numpy_impl
