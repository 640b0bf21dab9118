"""Numba switch.

Set ``MMFUSE_DISABLE_JIT=1`` to route every kernel through its pure-numpy
implementation. The flag is read once at import. The compiled kernels stay
importable (compilation is lazy) so benchmarks and tests can compare both
paths in one process.
"""

from __future__ import annotations

import os

try:
    from numba import njit as _njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _njit = None
    HAVE_NUMBA = False

JIT_DISABLED = os.environ.get("MMFUSE_DISABLE_JIT", "").strip().lower() in {"1", "true", "yes", "on"}

USE_JIT = HAVE_NUMBA and not JIT_DISABLED


def njit(fn):
    """``numba.njit(cache=True)`` when numba imports, otherwise the plain function."""
    if _njit is None:
        return fn
    return _njit(cache=True)(fn)
