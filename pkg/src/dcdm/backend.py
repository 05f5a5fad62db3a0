"""Compute backend selection.

Hot kernels (gemm, im2col, col2im) exist in two variants: numba-compiled
loops and pure numpy. The active variant is chosen by the DCDM_BACKEND
environment variable ("numba" or "numpy"); default is numba when the
import succeeds, numpy otherwise. `use_backend` flips the choice at
runtime, mainly for benchmarks and equivalence tests.
"""

from __future__ import annotations

import os
from contextlib import contextmanager

NUMBA = "numba"
NUMPY = "numpy"

try:
    import numba as _numba

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _numba = None
    HAS_NUMBA = False


def _default_backend() -> str:
    env = os.environ.get("DCDM_BACKEND", "").strip().lower()
    if env in (NUMBA, NUMPY):
        if env == NUMBA and not HAS_NUMBA:
            raise RuntimeError("DCDM_BACKEND=numba but numba is not importable")
        return env
    if env:
        raise RuntimeError(f"unknown DCDM_BACKEND value: {env!r}")
    return NUMBA if HAS_NUMBA else NUMPY


_active = _default_backend()


def active_backend() -> str:
    return _active


def set_backend(name: str) -> None:
    global _active
    if name not in (NUMBA, NUMPY):
        raise ValueError(f"unknown backend: {name!r}")
    if name == NUMBA and not HAS_NUMBA:
        raise RuntimeError("numba backend requested but numba is not importable")
    _active = name


@contextmanager
def use_backend(name: str):
    previous = _active
    set_backend(name)
    try:
        yield
    finally:
        set_backend(previous)


def max_threads() -> int:
    if HAS_NUMBA:
        return _numba.config.NUMBA_NUM_THREADS
    return 1


def set_num_threads(n: int) -> int:
    """Set the numba thread count, clamped to what the runtime allows.

    Returns the thread count actually in effect. No-op (returns 1) on the
    numpy backend, whose BLAS threading is configured by the environment
    before the process starts.
    """
    if n < 1:
        raise ValueError("thread count must be >= 1")
    if not HAS_NUMBA:
        return 1
    effective = min(n, max_threads())
    _numba.set_num_threads(effective)
    return effective


def get_num_threads() -> int:
    if not HAS_NUMBA:
        return 1
    return _numba.get_num_threads()
