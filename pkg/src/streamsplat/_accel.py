"""Optional numba acceleration.

Set ``STREAMSPLAT_DISABLE_NUMBA=1`` (or ``NUMBA_DISABLE_JIT=1``) to force the
pure-numpy code paths. ``HAVE_NUMBA`` tells callers whether compiled kernels
are available at all.
"""

import os

_DISABLED = os.environ.get("STREAMSPLAT_DISABLE_NUMBA", "") not in ("", "0") or (
    os.environ.get("NUMBA_DISABLE_JIT", "") not in ("", "0")
)

try:
    if _DISABLED:
        raise ImportError
    import numba

    HAVE_NUMBA = True

    def njit(*args, **kwargs):
        kwargs.setdefault("cache", True)
        kwargs.setdefault("nogil", True)
        return numba.njit(*args, **kwargs)

except ImportError:
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        # dummy decorator; kernels guarded by HAVE_NUMBA are never called
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda f: f


def default_backend():
    """Backend name used when a caller does not pick one explicitly."""
    return "numba" if HAVE_NUMBA else "numpy"
