"""Stereo geometry: depth conversion, back-projection, the differentiable
right-to-left warp, photometric/smoothness losses and their analytic gradient.

Warping follows I_l(u, v) = I_r(u + d(u, v), v).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import kernels
from .frames import CameraIntrinsics
from .imagecore import DisparityMap, build_pyramid, downsample_half, upsample_adjoint

GUIDANCE_MODES = ("stereo_photometric", "raw_sign", "none")


class DepthMap(DisparityMap):
    """Same container as ``DisparityMap`` with values in meters."""


@dataclass(frozen=True)
class GuidanceConfig:
    s: float = 1.0
    gamma: float = 0.1
    pyramid_levels: int = 3
    ssim_window: int = 7
    ssim_c1: float = 0.01**2
    ssim_c2: float = 0.03**2
    mode: str = "stereo_photometric"
    alpha: float = 0.1

    def __post_init__(self):
        if self.mode not in GUIDANCE_MODES:
            raise ValueError(f"guidance mode must be one of {GUIDANCE_MODES}")
        # s is signed on purpose (see diffusion.guided_step); only its use is checked
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.pyramid_levels < 1:
            raise ValueError("pyramid_levels must be >= 1")
        if self.ssim_window < 1 or self.ssim_window % 2 == 0:
            raise ValueError("ssim_window must be odd")
        if self.ssim_c1 <= 0 or self.ssim_c2 <= 0:
            raise ValueError("SSIM stabilisers must be positive")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")

    def to_dict(self):
        return asdict(self)


@dataclass
class PointCloud:
    points: np.ndarray  # (N, 3) meters
    colors: np.ndarray | None = None  # (N, 3) uint8
    pixels: np.ndarray | None = None  # (N, 2) source (u, v)


# ------------------------------------------------------- depth <-> disparity

def disparity_to_depth(disp: DisparityMap, cam: CameraIntrinsics, min_disp=0.1) -> DepthMap:
    if min_disp <= 0:
        raise ValueError("min_disp must be positive")
    ok = disp.valid & (disp.values >= min_disp)
    depth = np.zeros(disp.shape)
    depth[ok] = cam.fx * cam.baseline / disp.values[ok]
    return DepthMap(depth, ok)


def depth_to_disparity(depth: DepthMap, cam: CameraIntrinsics) -> DisparityMap:
    ok = depth.valid & (depth.values > 0)
    disp = np.zeros(depth.shape)
    disp[ok] = cam.fx * cam.baseline / depth.values[ok]
    return DisparityMap(disp, ok)


def backproject(depth: DepthMap, cam: CameraIntrinsics, color=None) -> PointCloud:
    """point = z * K^-1 (u, v, 1) for every valid pixel, row-major order."""
    if color is not None and np.asarray(color).shape[:2] != depth.shape:
        raise ValueError("color and depth sizes differ")
    vs, us = np.nonzero(depth.valid & (depth.values > 0))
    z = depth.values[vs, us]
    pix = np.stack([us, vs, np.ones_like(us)], axis=0).astype(np.float64)
    rays = np.linalg.solve(cam.K, pix)
    pts = (rays * z[None, :]).T
    cols = None
    if color is not None:
        c = np.asarray(color, dtype=np.float64)
        if c.ndim == 2:
            c = np.repeat(c[:, :, None], 3, axis=2)
        cols = np.clip(np.round(c[vs, us] * 255.0), 0, 255).astype(np.uint8)
    return PointCloud(pts, cols, np.stack([us, vs], axis=1))


def project(points, cam: CameraIntrinsics):
    p = np.asarray(points, dtype=np.float64)
    uvw = p @ cam.K.T
    return uvw[:, :2] / uvw[:, 2:3]


def save_ply(cloud: PointCloud, path) -> None:
    n = len(cloud.points)
    head = ["ply", "format ascii 1.0", f"element vertex {n}"]
    head += ["property double x", "property double y", "property double z"]
    if cloud.colors is not None:
        head += ["property uchar red", "property uchar green", "property uchar blue"]
    head.append("end_header")
    with open(path, "w") as f:
        f.write("\n".join(head) + "\n")
        for i in range(n):
            x, y, z = cloud.points[i]
            line = f"{float(x)!r} {float(y)!r} {float(z)!r}"
            if cloud.colors is not None:
                r, g, b = cloud.colors[i]
                line += f" {r} {g} {b}"
            f.write(line + "\n")


def load_ply(path) -> PointCloud:
    with open(path) as f:
        lines = f.read().splitlines()
    end = lines.index("end_header")
    n = int(next(l.split()[2] for l in lines[:end] if l.startswith("element vertex")))
    has_color = any("red" in l for l in lines[:end])
    rows = [l.split() for l in lines[end + 1 : end + 1 + n]]
    pts = np.array([[float(v) for v in r[:3]] for r in rows]).reshape(n, 3)
    cols = np.array([[int(v) for v in r[3:6]] for r in rows], dtype=np.uint8) if has_color else None
    return PointCloud(pts, cols)


# ------------------------------------------------------------------ warping

def _disp_array(disp):
    return disp.values if isinstance(disp, DisparityMap) else np.asarray(disp, dtype=np.float64)


def warp_right_to_left(right, disp):
    """Ĩ_l(u, v) = I_r(u + d(u, v), v) with clamp-to-edge linear sampling."""
    r = np.asarray(right, dtype=np.float64)
    d = _disp_array(disp)
    if r.shape != d.shape:
        raise ValueError(f"right {r.shape} and disparity {d.shape} differ")
    return kernels.warp_rows(r, d)[0]


# -------------------------------------------------------------------- SSIM

def _box_sum(x, r):
    h, w = x.shape
    p = np.zeros((h + 2 * r + 1, w + 2 * r + 1))
    p[r + 1 : r + 1 + h, r + 1 : r + 1 + w] = x
    c = p.cumsum(0).cumsum(1)
    k = 2 * r + 1
    return c[k:, k:] - c[:-k, k:] - c[k:, :-k] + c[:-k, :-k]


class _BoxMean:
    """Window mean over the in-image part of the window (count-normalised)."""

    def __init__(self, shape, window):
        self.r = window // 2
        self.count = _box_sum(np.ones(shape), self.r)

    def __call__(self, x):
        return _box_sum(x, self.r) / self.count

    def adjoint(self, g):
        return _box_sum(g / self.count, self.r)


def _ssim_parts(a, b, window, c1, c2):
    box = _BoxMean(a.shape, window)
    mu_a, mu_b = box(a), box(b)
    e_aa, e_bb, e_ab = box(a * a), box(b * b), box(a * b)
    var_a = e_aa - mu_a**2
    var_b = e_bb - mu_b**2
    cov = e_ab - mu_a * mu_b
    A1 = 2 * mu_a * mu_b + c1
    A2 = 2 * cov + c2
    B1 = mu_a**2 + mu_b**2 + c1
    B2 = var_a + var_b + c2
    ssim = (A1 * A2) / (B1 * B2)
    return box, mu_a, mu_b, A1, A2, B1, B2, ssim


def ssim_loss(a, b, window=7, c1=0.01**2, c2=0.03**2):
    """Per-pixel (1 - SSIM) / 2 with window statistics, and its mean."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError("ssim_loss needs two single-channel images of equal size")
    *_, ssim = _ssim_parts(a, b, window, c1, c2)
    lmap = (1.0 - ssim) / 2.0
    return float(lmap.mean()), lmap


def _ssim_loss_grad_b(a, b, window, c1, c2):
    """d mean((1-SSIM)/2) / d b."""
    box, mu_a, mu_b, A1, A2, B1, B2, _ = _ssim_parts(a, b, window, c1, c2)
    gS = -0.5 / a.size
    N = A1 * A2
    D = B1 * B2
    D2 = D * D
    # partials of SSIM w.r.t. the window statistics of b
    dN_mu = 2 * mu_a * A2 + A1 * (-2 * mu_a)
    dD_mu = 2 * mu_b * B2 + B1 * (-2 * mu_b)
    dS_mu = (dN_mu * D - N * dD_mu) / D2
    dS_ebb = -N * B1 / D2
    dS_eab = 2 * A1 / D
    return (
        box.adjoint(gS * dS_mu)
        + 2 * b * box.adjoint(gS * dS_ebb)
        + a * box.adjoint(gS * dS_eab)
    )


# -------------------------------------------------------------- smoothness

def smoothness_loss(left, disp):
    """|∂u d| * exp(-|∂u I|) with forward differences, last column zero."""
    img = np.asarray(left, dtype=np.float64)
    d = _disp_array(disp)
    if img.shape != d.shape:
        raise ValueError("image and disparity sizes differ")
    m = np.zeros_like(d)
    m[:, :-1] = np.abs(d[:, 1:] - d[:, :-1]) * np.exp(-np.abs(img[:, 1:] - img[:, :-1]))
    return float(m.mean()), m


def _smoothness_grad(img, d):
    g = np.zeros_like(d)
    w = np.exp(-np.abs(img[:, 1:] - img[:, :-1])) / d.size
    s = np.sign(d[:, 1:] - d[:, :-1]) * w
    g[:, 1:] += s
    g[:, :-1] -= s
    return g


# --------------------------------------------------- stereo matching loss

def _levels(left, right, disp, cfg: GuidanceConfig):
    L = build_pyramid(np.asarray(left, dtype=np.float64), cfg.pyramid_levels)
    R = build_pyramid(np.asarray(right, dtype=np.float64), cfg.pyramid_levels)
    D = [_disp_array(disp).astype(np.float64)]
    for k in range(1, cfg.pyramid_levels):
        D.append(downsample_half(D[-1]) * 0.5)
    return L, R, D


def stereo_matching_loss(left, right, disp, cfg: GuidanceConfig) -> float:
    """Sum over pyramid levels of SSIM loss(left_k, warp_k) + gamma * smoothness_k.

    Coarser disparities are block-averaged and divided by 2^k.
    """
    L, R, D = _levels(left, right, disp, cfg)
    total = 0.0
    for lk, rk, dk in zip(L, R, D):
        warped = kernels.warp_rows(rk, dk)[0]
        total += ssim_loss(lk, warped, cfg.ssim_window, cfg.ssim_c1, cfg.ssim_c2)[0]
        if cfg.gamma:
            total += cfg.gamma * smoothness_loss(lk, dk)[0]
    return total


def grad_stereo_matching_loss(left, right, disp, cfg: GuidanceConfig):
    """Exact gradient of ``stereo_matching_loss`` w.r.t. each disparity value (pixels)."""
    L, R, D = _levels(left, right, disp, cfg)
    shapes = [d.shape for d in D]
    grads = []
    for lk, rk, dk in zip(L, R, D):
        warped, slope = kernels.warp_rows(rk, dk)
        g = _ssim_loss_grad_b(lk, warped, cfg.ssim_window, cfg.ssim_c1, cfg.ssim_c2) * slope
        if cfg.gamma:
            g = g + cfg.gamma * _smoothness_grad(lk, dk)
        grads.append(g)
    # back through the per-level downsample-and-rescale, coarse to fine
    acc = grads[-1]
    for k in range(len(grads) - 1, 0, -1):
        acc = grads[k - 1] + upsample_adjoint(acc, shapes[k - 1]) * 0.5
    return acc


def raw_sign_guidance(disp_t, raw: DisparityMap, alpha):
    """alpha * sign(raw - disp_t) where raw is valid and positive, else 0."""
    d = _disp_array(disp_t)
    if d.shape != raw.shape:
        raise ValueError("disparity sizes differ")
    w = raw.valid & (raw.values > 0)
    return np.where(w, alpha * np.sign(raw.values - d), 0.0)
