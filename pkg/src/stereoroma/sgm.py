"""Census-cost semi-global matching producing the raw disparity map."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import kernels
from .frames import StereoFrame
from .imagecore import DisparityMap

# (dy, dx) per path; the first four are used when num_paths == 4.
# Summation always follows this order so results are bit-deterministic.
DIRECTIONS = ((0, 1), (0, -1), (1, 0), (-1, 0), (1, 1), (-1, -1), (1, -1), (-1, 1))


@dataclass(frozen=True)
class SgmParams:
    d_max: int = 32
    census_window: int = 5
    p1: int = 10
    p2: int = 120
    num_paths: int = 8
    lr_threshold: float = 1.0
    uniqueness_ratio: float = 0.95
    speckle_size: int = 0  # regions smaller than this are invalidated; 0 disables
    speckle_range: float = 1.0

    def __post_init__(self):
        if not 0 < self.p1 < self.p2:
            raise ValueError("need 0 < p1 < p2")
        if self.census_window < 3 or self.census_window % 2 == 0:
            raise ValueError("census_window must be odd and >= 3")
        if self.census_window > 7:
            raise ValueError("census_window > 7 does not fit a 64-bit census code")
        if self.d_max < 1:
            raise ValueError("d_max must be >= 1")
        if self.lr_threshold < 0:
            raise ValueError("lr_threshold must be >= 0")
        if self.num_paths not in (4, 8):
            raise ValueError("num_paths must be 4 or 8")
        if self.speckle_size < 0 or self.speckle_range < 0:
            raise ValueError("speckle_size and speckle_range must be >= 0")
        if not 0 < self.uniqueness_ratio <= 1:
            raise ValueError("uniqueness_ratio must be in (0, 1]")

    @property
    def max_cost(self):
        return self.census_window**2 - 1

    def to_dict(self):
        return asdict(self)


def census_transform(img, window=5):
    """Per-pixel bit code, bit set where the neighbour is brighter than the centre.

    Bits run row-major over the window with the centre skipped; borders use
    clamped neighbourhoods.
    """
    a = np.asarray(img)
    if a.ndim != 2:
        raise ValueError("census_transform needs a single-channel image")
    if window % 2 == 0 or window < 3 or window > 7:
        raise ValueError("window must be odd, 3..7")
    if window > min(a.shape):
        raise ValueError("window larger than image")
    return kernels.census(a, window)


def compute_cost_volume(census_left, census_right, d_max, max_cost=None):
    """cost[v, u, d] = Hamming(L(u, v), R(u + d, v)); out-of-frame gets ``max_cost``."""
    if census_left.shape != census_right.shape:
        raise ValueError("census images differ in size")
    if max_cost is None:
        max_cost = 64
    return kernels.cost_volume(census_left, census_right, d_max, max_cost)


def aggregate_paths(cost, params: SgmParams):
    total = np.zeros(cost.shape, dtype=np.int32)
    for dy, dx in DIRECTIONS[: params.num_paths]:
        total += kernels.aggregate_direction(cost, dy, dx, params.p1, params.p2)
    return total


def _equiangular(agg, d_int):
    h, w, nd = agg.shape
    rows, cols = np.indices((h, w))
    offset = np.zeros((h, w))
    inner = (d_int > 0) & (d_int < nd - 1)
    dm = np.clip(d_int - 1, 0, nd - 1)
    dp = np.clip(d_int + 1, 0, nd - 1)
    c0 = agg[rows, cols, d_int].astype(np.float64)
    cm = agg[rows, cols, dm].astype(np.float64)
    cp = agg[rows, cols, dp].astype(np.float64)
    denom = np.where(cp <= cm, cm - c0, cp - c0)
    ok = inner & (denom > 0)
    offset[ok] = (cm[ok] - cp[ok]) / (2.0 * denom[ok])
    return np.clip(offset, -0.5, 0.5)


def _right_wta(agg):
    """Right-view WTA read off the left-referenced volume: R(u') pairs with L(u' - d).

    Only a fallback for callers without a right-referenced volume; near
    occlusions it inherits the left view's smoothing and is less strict.
    """
    h, w, nd = agg.shape
    big = np.iinfo(np.int32).max
    shifted = np.full((h, w, nd), big, dtype=np.int32)
    for d in range(min(nd, w)):
        shifted[:, d:, d] = agg[:, : w - d, d]
    return shifted.argmin(axis=2)


def disparity_from_volume(agg, params: SgmParams, d_right=None):
    """WTA, uniqueness, left-right check and speckle filter on a left-referenced volume.

    ``d_right`` is the integer WTA disparity of the right view (R(u') pairs
    with L(u' - d)); without it the check falls back to ``_right_wta``.
    """
    h, w, nd = agg.shape
    d_int = agg.argmin(axis=2)
    rows, cols = np.indices((h, w))
    best = agg[rows, cols, d_int].astype(np.float64)

    dd = np.arange(nd)[None, None, :]
    far = np.abs(dd - d_int[:, :, None]) > 1
    second = np.where(far, agg, np.iinfo(np.int32).max).min(axis=2).astype(np.float64)
    if nd > 2:
        unique = best < params.uniqueness_ratio * second
    else:
        unique = np.ones((h, w), dtype=bool)

    if d_right is None:
        d_right = _right_wta(agg)
    target = cols + d_int
    inside = target < w
    lr_ok = np.zeros((h, w), dtype=bool)
    lr_ok[inside] = (
        np.abs(d_int[inside] - d_right[rows[inside], target[inside]]) <= params.lr_threshold
    )

    values = d_int + _equiangular(agg, d_int)
    valid = unique & lr_ok
    if params.speckle_size > 0:
        valid &= kernels.region_sizes(values, valid, params.speckle_range) >= params.speckle_size
    return DisparityMap(values, valid)


def compute_raw_disparity(frame: StereoFrame, params: SgmParams | None = None) -> DisparityMap:
    """WTA + equiangular subpixel + uniqueness and left-right checks.

    The right disparity for the consistency check comes from its own
    aggregated, right-referenced volume.
    """
    params = params or SgmParams()
    left = np.asarray(frame.left, dtype=np.float64)
    right = np.asarray(frame.right, dtype=np.float64)
    if left.ndim != 2 or right.ndim != 2:
        raise ValueError("SGM needs single-channel rectified images")
    agg = _aggregated(left, right, params)
    # the right view as reference: mirroring both images turns R(u') vs L(u' - d)
    # into the left-referenced form
    agg_r = _aggregated(right[:, ::-1], left[:, ::-1], params)
    d_right = agg_r.argmin(axis=2)[:, ::-1]
    return disparity_from_volume(agg, params, d_right)


def _aggregated(ref, other, params: SgmParams):
    c_ref = census_transform(ref, params.census_window)
    c_other = census_transform(other, params.census_window)
    cost = compute_cost_volume(c_ref, c_other, params.d_max, params.max_cost)
    return aggregate_paths(cost, params)
