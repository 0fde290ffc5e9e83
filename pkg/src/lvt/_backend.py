"""Kernel backend selection and thread control.

Two environment flags are read at import time:

``LVT_BACKEND``
    ``numba`` (default when numba is importable) or ``numpy``. Selects
    whether the hot loops in :mod:`lvt.kernels` run as compiled numba
    kernels or as the pure-numpy lowering.
``LVT_DETERMINISTIC``
    ``1`` pins BLAS and numba to a single thread so every op is bitwise
    reproducible.
"""

from __future__ import annotations

import os
from contextlib import contextmanager

try:
    import numba

    # the bundled TBB is too old; skip it rather than warn on first launch
    numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover
    threadpool_limits = None

BACKENDS = ("numba", "numpy")

_state = {"backend": None}


def _default_backend() -> str:
    name = os.environ.get("LVT_BACKEND", "").strip().lower()
    if not name:
        return "numba" if HAVE_NUMBA else "numpy"
    if name not in BACKENDS:
        raise ValueError(f"LVT_BACKEND must be one of {BACKENDS}, got {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("LVT_BACKEND=numba but numba is not importable")
    return name


def get_backend() -> str:
    if _state["backend"] is None:
        _state["backend"] = _default_backend()
    return _state["backend"]


def set_backend(name: str) -> None:
    if name not in BACKENDS:
        raise ValueError(f"backend must be one of {BACKENDS}, got {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba backend requested but numba is not importable")
    _state["backend"] = name


@contextmanager
def use_backend(name: str):
    prev = get_backend()
    set_backend(name)
    try:
        yield
    finally:
        _state["backend"] = prev


def deterministic() -> bool:
    return os.environ.get("LVT_DETERMINISTIC", "0").strip() == "1"


def _set_numba_threads(n: int) -> int:
    if not HAVE_NUMBA:
        return 1
    n = max(1, min(n, numba.config.NUMBA_NUM_THREADS))
    prev = numba.get_num_threads()
    numba.set_num_threads(n)
    return prev


@contextmanager
def limit_threads(n: int):
    """Cap BLAS and numba worker threads to ``n`` inside the block."""
    prev = _set_numba_threads(n)
    try:
        if threadpool_limits is not None:
            with threadpool_limits(limits=n):
                yield
        else:  # pragma: no cover
            yield
    finally:
        _set_numba_threads(prev)


def apply_env_threading() -> None:
    if deterministic():
        _set_numba_threads(1)
        if threadpool_limits is not None:
            threadpool_limits(limits=1)


if HAVE_NUMBA:
    njit = numba.njit
    prange = numba.prange
else:  # pragma: no cover

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda f: f

    prange = range
