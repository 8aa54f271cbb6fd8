"""Kernel backend and worker-count selection.

``STEREOROMA_BACKEND`` picks the hot-loop implementation: ``numba`` (default,
falls back to ``numpy`` when numba is not importable) or ``numpy``.
``STEREOROMA_THREADS`` caps the numba worker count; 0 or unset means auto.
"""

import os

try:
    import numba

    # TBB in this image is too old for numba; avoid the probe warning
    if "NUMBA_THREADING_LAYER" not in os.environ:
        numba.config.THREADING_LAYER = "workqueue"
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False


def requested_backend():
    name = os.environ.get("STEREOROMA_BACKEND", "numba").strip().lower()
    if name not in ("numba", "numpy"):
        raise ValueError(f"STEREOROMA_BACKEND must be 'numba' or 'numpy', got {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        return "numpy"
    return name


def configure_threads():
    raw = os.environ.get("STEREOROMA_THREADS", "0").strip() or "0"
    n = int(raw)
    if n < 0:
        raise ValueError("STEREOROMA_THREADS must be >= 0")
    if HAVE_NUMBA and n > 0:
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    return n
