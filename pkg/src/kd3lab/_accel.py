"""Backend switch for the hot kernels.

Every kernel in :mod:`kd3lab._kernels` exists twice: a numba ``@njit`` version
and a pure-numpy/pure-Python fallback with identical semantics.  The numba path
is used when numba imports cleanly and ``KD3LAB_NO_NUMBA`` is unset (or ``0``).
"""

from __future__ import annotations

import contextlib
import os

# the bundled TBB is too old for numba; workqueue is always available
os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False


def _env_disabled() -> bool:
    return os.environ.get("KD3LAB_NO_NUMBA", "0").strip().lower() not in ("", "0", "false", "no")


_use_numba = HAVE_NUMBA and not _env_disabled()


def using_numba() -> bool:
    return _use_numba


def backend_name() -> str:
    return "numba" if _use_numba else "numpy"


@contextlib.contextmanager
def backend(name: str):
    """Temporarily force ``"numba"`` or ``"numpy"`` kernels."""
    global _use_numba
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba backend requested but numba is not importable")
    prev = _use_numba
    _use_numba = name == "numba"
    try:
        yield
    finally:
        _use_numba = prev


def set_threads(n: int) -> None:
    """Set the worker count for parallel (per-instance) numba kernels."""
    if n < 1:
        raise ValueError("threads must be >= 1")
    if HAVE_NUMBA:
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


if HAVE_NUMBA:
    njit = numba.njit
    prange = numba.prange
else:  # pragma: no cover
    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f

    prange = range
