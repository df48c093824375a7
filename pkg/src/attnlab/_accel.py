"""Switch between numba-compiled loop kernels and plain numpy kernels.

Set ``ATTNLAB_NO_NUMBA=1`` in the environment (before import) to force the
numpy implementations.  Both paths compute the same quantities; they can
differ in the last few ulps because summation order differs.
"""

from __future__ import annotations

import os
from typing import Callable

_FLAG = os.environ.get("ATTNLAB_NO_NUMBA", "").strip().lower()

try:
    import numba

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAS_NUMBA = False

USE_NUMBA: bool = HAS_NUMBA and _FLAG not in ("1", "true", "yes", "on")

NUMBA_OPTS = {"cache": True, "nogil": True}


def backend() -> str:
    """Name of the active kernel backend."""
    return "numba" if USE_NUMBA else "numpy"


def accelerated(numpy_impl: Callable) -> Callable[[Callable], Callable]:
    """Decorate a loop kernel; fall back to ``numpy_impl`` when numba is off.

    The decorated loop function is compiled with ``numba.njit``.  Both
    variants stay reachable as ``.loop`` and ``.numpy`` attributes on the
    returned callable so tests and benchmarks can compare them directly.
    """

    def wrap(loop_impl: Callable) -> Callable:
        if HAS_NUMBA:
            compiled = numba.njit(**NUMBA_OPTS)(loop_impl)
        else:  # pragma: no cover
            compiled = loop_impl
        chosen = compiled if USE_NUMBA else numpy_impl

        def dispatch(*args):
            return chosen(*args)

        dispatch.__name__ = loop_impl.__name__
        dispatch.__doc__ = loop_impl.__doc__
        dispatch.loop = compiled
        dispatch.numpy = numpy_impl
        return dispatch

    return wrap
