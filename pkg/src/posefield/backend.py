"""Kernel backend selection: numba-compiled loops vs pure-numpy fallbacks.

The hot geometry kernels (marching cubes, ray-parity tests, BVH closest-point
queries) exist in two flavours. By default the numba versions are used when
numba imports cleanly. Setting the environment variable

    POSEFIELD_PURE_NUMPY=1

forces the vectorized numpy fallbacks everywhere. Both paths compute identical
results; see benchmarks/bench_kernels.py for the speed comparison.
"""

import os

PURE_NUMPY_ENV = "POSEFIELD_PURE_NUMPY"

_pure = os.environ.get(PURE_NUMPY_ENV, "").strip().lower() in ("1", "true", "yes", "on")

try:
    from numba import njit  # noqa: F401

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        """No-op stand-in so kernel modules still import without numba."""
        if args and callable(args[0]):
            return args[0]

        def wrap(func):
            return func

        return wrap


def use_numba() -> bool:
    """True when compiled kernels should be dispatched to."""
    return HAVE_NUMBA and not _pure


def set_pure_numpy(flag: bool) -> None:
    """Override the env-derived choice (used by tests and benchmarks)."""
    global _pure
    _pure = bool(flag)
