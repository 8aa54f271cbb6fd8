"""Hot inner loops with interchangeable numba / numpy implementations.

The active backend is chosen once from ``STEREOROMA_BACKEND``; ``use_backend``
switches it at runtime (tests and benchmarks use this to compare both).
"""

import numpy as np

from .._backend import configure_threads, requested_backend
from . import _numpy as numpy_impl

try:
    from . import _numba as numba_impl
except ImportError:  # pragma: no cover
    numba_impl = None

_IMPLS = {"numpy": numpy_impl, "numba": numba_impl}
_active = None


def use_backend(name):
    global _active
    if name not in _IMPLS or _IMPLS[name] is None:
        raise ValueError(f"backend {name!r} unavailable")
    _active = name


def active_backend():
    return _active


def _impl():
    return _IMPLS[_active]


def census(img, window):
    return _impl().census(np.ascontiguousarray(img, dtype=np.float64), int(window))


def cost_volume(census_l, census_r, d_max, max_cost):
    return _impl().cost_volume(census_l, census_r, int(d_max), int(max_cost))


def aggregate_direction(cost, dy, dx, p1, p2):
    return _impl().aggregate_direction(
        np.ascontiguousarray(cost, dtype=np.int32), int(dy), int(dx), int(p1), int(p2)
    )


def warp_rows(img, disp):
    return _impl().warp_rows(
        np.ascontiguousarray(img, dtype=np.float64), np.ascontiguousarray(disp, dtype=np.float64)
    )


def region_sizes(disp, valid, max_diff):
    return _impl().region_sizes(
        np.ascontiguousarray(disp, dtype=np.float64), np.ascontiguousarray(valid, dtype=np.bool_), float(max_diff)
    )


use_backend(requested_backend())
configure_threads()
