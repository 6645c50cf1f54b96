"""Numba switch.

Hot kernels are written once in a numba-compatible subset of Python and
decorated with :func:`njit`.  Setting ``LHARQ_DISABLE_NUMBA=1`` (or running
without numba installed) leaves them as plain Python over numpy arrays, and
the vectorisable kernels dispatch to their numpy implementations instead.
"""
import os

_FLAG = os.environ.get("LHARQ_DISABLE_NUMBA", "").strip().lower()

try:
    import numba as _numba
except ImportError:  # pragma: no cover
    _numba = None

USE_NUMBA = _numba is not None and _FLAG not in ("1", "true", "yes", "on")


def njit(func=None, **kwargs):
    """``numba.njit(cache=True)`` when enabled, identity otherwise."""
    def wrap(f):
        if not USE_NUMBA:
            return f
        opts = {"cache": True}
        opts.update(kwargs)
        return _numba.njit(**opts)(f)

    if func is not None:
        return wrap(func)
    return wrap


def backend():
    return "numba" if USE_NUMBA else "numpy"
