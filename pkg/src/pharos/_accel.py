"""Numba switch.

Set ``PHAROS_DISABLE_NUMBA=1`` to force the pure-numpy kernels, e.g. when
debugging or on a platform without an LLVM toolchain.
"""
import os

_DISABLED = os.environ.get("PHAROS_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes", "on")

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and not _DISABLED


def njit(*args, **kwargs):
    """``numba.njit`` with caching on, or a passthrough when numba is unavailable."""
    if not HAVE_NUMBA:
        if len(args) == 1 and callable(args[0]):
            return args[0]
        return lambda f: f
    kwargs.setdefault("cache", True)
    return numba.njit(*args, **kwargs)
