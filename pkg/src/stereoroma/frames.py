"""Camera and stereo-frame containers shared across modules."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imagecore import DisparityMap


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    baseline: float  # meters

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0 and self.baseline > 0):
            raise ValueError("fx, fy and baseline must be positive")

    @property
    def K(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def to_dict(self):
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy, "baseline": self.baseline}


@dataclass
class StereoFrame:
    """Rectified pair; the convention is I_l(u, v) = I_r(u + d(u, v), v)."""

    left: np.ndarray
    right: np.ndarray
    raw: DisparityMap | None = None
    color: np.ndarray | None = None
    cam: CameraIntrinsics | None = None

    def __post_init__(self):
        self.left = np.asarray(self.left, dtype=np.float32)
        self.right = np.asarray(self.right, dtype=np.float32)
        if self.left.shape != self.right.shape:
            raise ValueError(f"left {self.left.shape} and right {self.right.shape} differ")

    @property
    def shape(self):
        return self.left.shape[:2]
