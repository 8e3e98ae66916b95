"""numba switch.

Set ``SWARM_LFO_NO_NUMBA=1`` to run every hot path through the vectorized
numpy implementations instead of the jitted loops.
"""

import os

_DISABLED = os.environ.get("SWARM_LFO_NO_NUMBA", "").strip().lower() in ("1", "true", "yes")

try:
    if _DISABLED:
        raise ImportError
    from numba import njit as _numba_njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised with the env flag
    _numba_njit = None
    HAVE_NUMBA = False


def njit(*args, **kwargs):
    """``numba.njit`` when enabled, identity decorator otherwise."""
    if HAVE_NUMBA:
        return _numba_njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]

    def wrapper(func):
        return func

    return wrapper


def use_numba() -> bool:
    return HAVE_NUMBA
