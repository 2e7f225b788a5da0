"""Kernel backend selection.

The hot loops (per-pixel blending and its reverse pass) exist twice: as numba
kernels and as vectorized numpy. ``SURFELGS_BACKEND=numpy`` forces the numpy
path; otherwise numba is used when importable.
"""

import os

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
else:
    # skip the TBB probe; its version check only emits warnings here
    numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

_requested = os.environ.get("SURFELGS_BACKEND", "numba").strip().lower()
if _requested not in ("numba", "numpy"):
    raise ValueError(f"SURFELGS_BACKEND must be 'numba' or 'numpy', got {_requested!r}")

HAVE_NUMBA = numba is not None
DEFAULT_BACKEND = "numba" if (_requested == "numba" and HAVE_NUMBA) else "numpy"


def resolve(backend=None):
    """Return the backend name to use for a call, validating overrides."""
    name = DEFAULT_BACKEND if backend is None else backend
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba backend requested but numba is not installed")
    return name


def set_threads(n):
    """Cap the numba worker count (no-op for the numpy backend)."""
    if HAVE_NUMBA and n:
        numba.set_num_threads(min(int(n), numba.config.NUMBA_NUM_THREADS))
