"""Float image IO, pyramids and bilinear sampling.

Images are plain ``numpy`` arrays of shape ``(H, W)`` or ``(H, W, C)``;
values loaded from integer formats are scaled to [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image


class ImageFormatError(ValueError):
    """Base class for image decoding failures."""


class UnsupportedFormatError(ImageFormatError):
    pass


class TruncatedFileError(ImageFormatError):
    pass


class HeaderMismatchError(ImageFormatError):
    pass


class ImageTooSmallError(ValueError):
    pass


@dataclass
class DisparityMap:
    """Per-pixel horizontal disparity in pixels plus a validity mask.

    Invalid pixels store 0.
    """

    values: np.ndarray
    valid: np.ndarray = field(default=None)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("disparity must be 2-D")
        if self.valid is None:
            self.valid = np.isfinite(self.values)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.valid.shape != self.values.shape:
            raise ValueError("validity mask shape does not match values")
        self.values = np.where(self.valid, self.values, 0.0)

    @property
    def shape(self):
        return self.values.shape

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]


def as_image(img, dtype=np.float32):
    a = np.asarray(img, dtype=dtype)
    if a.ndim not in (2, 3):
        raise ValueError(f"expected (H, W) or (H, W, C) image, got shape {a.shape}")
    return a


def channels(img):
    return 1 if img.ndim == 2 else img.shape[2]


# --------------------------------------------------------------------- IO

def _read_token_lines(buf, count, start=0):
    """Return ``count`` whitespace-separated header tokens and the payload offset.

    Netpbm comments (``#`` to end of line) are skipped.
    """
    tokens = []
    i = start
    n = len(buf)
    while len(tokens) < count:
        while i < n and buf[i : i + 1].isspace():
            i += 1
        if i < n and buf[i : i + 1] == b"#":
            while i < n and buf[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < n and not buf[j : j + 1].isspace():
            j += 1
        if j == i:
            raise TruncatedFileError("header ended prematurely")
        tokens.append(buf[i:j])
        i = j
    # exactly one whitespace byte separates header and raster
    return tokens, i + 1


def _load_pgm(buf):
    tokens, off = _read_token_lines(buf, 4)
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise HeaderMismatchError(f"malformed PGM header: {exc}") from None
    if w <= 0 or h <= 0 or not 0 < maxval < 65536:
        raise HeaderMismatchError(f"bad PGM dims/maxval {w}x{h}/{maxval}")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    need = w * h * dtype.itemsize
    payload = buf[off:]
    if len(payload) < need:
        raise TruncatedFileError(f"PGM payload has {len(payload)} bytes, need {need}")
    if len(payload) > need:
        raise HeaderMismatchError(f"PGM payload has {len(payload) - need} trailing bytes")
    data = np.frombuffer(payload, dtype=dtype).reshape(h, w)
    return (data.astype(np.float64) / maxval).astype(np.float32)


def _load_pfm(buf):
    tokens, off = _read_token_lines(buf, 4)
    kind = tokens[0]
    nch = 3 if kind == b"PF" else 1
    try:
        w, h = int(tokens[1]), int(tokens[2])
        scale = float(tokens[3])
    except ValueError:
        raise HeaderMismatchError("malformed PFM header") from None
    if w <= 0 or h <= 0 or scale == 0.0:
        raise HeaderMismatchError(f"bad PFM dims/scale {w}x{h}/{scale}")
    endian = "<" if scale < 0 else ">"
    need = w * h * nch * 4
    payload = buf[off:]
    if len(payload) < need:
        raise TruncatedFileError(f"PFM payload has {len(payload)} bytes, need {need}")
    if len(payload) > need:
        raise HeaderMismatchError(f"PFM payload has {len(payload) - need} trailing bytes")
    data = np.frombuffer(payload, dtype=endian + "f4")
    shape = (h, w, 3) if nch == 3 else (h, w)
    # PFM rows are stored bottom-up
    return np.flipud(data.reshape(shape)).astype(np.float32)


def load_image(path) -> np.ndarray:
    """Load a PGM (P5, 8/16 bit), PNG (8-bit gray/RGB) or PFM file as float32."""
    path = Path(path)
    buf = path.read_bytes()
    if buf[:2] in (b"Pf", b"PF"):
        return _load_pfm(buf)
    if buf[:2] == b"P5":
        return _load_pgm(buf)
    if buf[:8] == b"\x89PNG\r\n\x1a\n":
        try:
            with Image.open(path) as im:
                im.load()
                if im.mode not in ("L", "RGB"):
                    raise UnsupportedFormatError(f"unsupported PNG mode {im.mode}")
                arr = np.asarray(im, dtype=np.float64)
        except (OSError, SyntaxError) as exc:
            raise TruncatedFileError(f"cannot decode PNG {path}: {exc}") from None
        return (arr / 255.0).astype(np.float32)
    raise UnsupportedFormatError(f"unrecognised image format: {path}")


def save_pfm(img, path) -> None:
    """Write a little-endian PFM (scale -1.0), rows bottom-up."""
    a = np.asarray(img)
    if a.ndim == 3 and a.shape[2] == 1:
        a = a[:, :, 0]
    if a.ndim == 2:
        kind = b"Pf"
    elif a.ndim == 3 and a.shape[2] == 3:
        kind = b"PF"
    else:
        raise ValueError(f"PFM needs 1 or 3 channels, got shape {a.shape}")
    h, w = a.shape[:2]
    payload = np.ascontiguousarray(np.flipud(a.astype("<f4")))
    with open(path, "wb") as f:
        f.write(kind + b"\n")
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")
        f.write(payload.tobytes())


def save_pgm(img, path, maxval=255) -> None:
    """Write an 8- or 16-bit binary PGM from integer counts in [0, maxval]."""
    a = np.asarray(img)
    if a.ndim != 2:
        raise ValueError("PGM is single channel")
    if maxval > 255:
        data = np.clip(a, 0, maxval).astype(">u2")
    else:
        data = np.clip(a, 0, maxval).astype(np.uint8)
    h, w = a.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n{maxval}\n".encode())
        f.write(data.tobytes())


# ---------------------------------------------------------- resampling

def downsample_half(img):
    """2x2 box average; a trailing odd row/column is dropped."""
    a = np.asarray(img)
    h, w = a.shape[:2]
    if h < 2 or w < 2:
        raise ImageTooSmallError(f"cannot halve a {w}x{h} image")
    h2, w2 = h // 2, w // 2
    a = a[: 2 * h2, : 2 * w2]
    out = (a[0::2, 0::2] + a[1::2, 0::2] + a[0::2, 1::2] + a[1::2, 1::2]) * 0.25
    return out.astype(a.dtype, copy=False)


def upsample_adjoint(grad, shape):
    """Adjoint of ``downsample_half`` for a target fine-level ``shape``."""
    out = np.zeros(shape, dtype=np.float64)
    g = 0.25 * np.asarray(grad, dtype=np.float64)
    h2, w2 = g.shape[:2]
    for oy in (0, 1):
        for ox in (0, 1):
            out[oy : 2 * h2 : 2, ox : 2 * w2 : 2] = g
    return out


def build_pyramid(img, levels):
    """List of images, level i being ``downsample_half`` applied i times."""
    if levels < 1:
        raise ValueError("levels must be >= 1")
    a = np.asarray(img)
    h, w = a.shape[:2]
    if levels > 1 and (h >> (levels - 1) < 8 or w >> (levels - 1) < 8):
        raise ImageTooSmallError(
            f"{levels} levels leave a coarsest level smaller than 8x8 for a {w}x{h} image"
        )
    pyr = [a]
    for _ in range(levels - 1):
        pyr.append(downsample_half(pyr[-1]))
    return pyr


def bilinear_sample(img, u, v):
    """Bilinear value at (u, v); coordinates are clamped to the image first."""
    a = np.asarray(img, dtype=np.float64)
    h, w = a.shape[:2]
    u = min(max(float(u), 0.0), w - 1.0)
    v = min(max(float(v), 0.0), h - 1.0)
    x0 = min(int(np.floor(u)), max(w - 2, 0))
    y0 = min(int(np.floor(v)), max(h - 2, 0))
    x1 = min(x0 + 1, w - 1)
    y1 = min(y0 + 1, h - 1)
    fx = u - x0
    fy = v - y0
    top = (1 - fx) * a[y0, x0] + fx * a[y0, x1]
    bot = (1 - fx) * a[y1, x0] + fx * a[y1, x1]
    return (1 - fy) * top + fy * bot


def upsample_bilinear(img, shape):
    """Resize a 2-D field to ``shape`` with align-corners bilinear interpolation."""
    a = np.asarray(img, dtype=np.float64)
    h, w = a.shape
    H, W = shape
    ys = np.linspace(0.0, h - 1.0, H) if H > 1 else np.zeros(1)
    xs = np.linspace(0.0, w - 1.0, W) if W > 1 else np.zeros(1)
    y0 = np.clip(np.floor(ys).astype(int), 0, max(h - 2, 0))
    x0 = np.clip(np.floor(xs).astype(int), 0, max(w - 2, 0))
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = (1 - fx) * a[np.ix_(y0, x0)] + fx * a[np.ix_(y0, x1)]
    bot = (1 - fx) * a[np.ix_(y1, x0)] + fx * a[np.ix_(y1, x1)]
    return (1 - fy) * top + fy * bot


# ---------------------------------------------------------- colormap

_JET_ANCHORS = np.array(
    [
        [0.0, 0, 0, 128],
        [0.125, 0, 0, 255],
        [0.375, 0, 255, 255],
        [0.625, 255, 255, 0],
        [0.875, 255, 0, 0],
        [1.0, 128, 0, 0],
    ]
)


def colormap_table():
    """256x3 uint8 jet-style table: linear ramps between the anchors above."""
    pos = np.linspace(0.0, 1.0, 256)
    table = np.stack(
        [np.interp(pos, _JET_ANCHORS[:, 0], _JET_ANCHORS[:, k]) for k in (1, 2, 3)], axis=1
    )
    return np.round(table).astype(np.uint8)


COLORMAP = colormap_table()


def colorize(disp: DisparityMap, d_max):
    if d_max <= 0:
        raise ValueError("d_max must be positive")
    idx = np.clip(np.round(disp.values / d_max * 255.0), 0, 255).astype(np.int64)
    rgb = COLORMAP[idx]
    rgb[~disp.valid] = 0
    return rgb


def colorize_disparity(disp: DisparityMap, d_max, path) -> None:
    """Write a pseudo-colour PNG; invalid pixels are black."""
    Image.fromarray(colorize(disp, d_max), mode="RGB").save(path)


def save_png_gray(img, path) -> None:
    a = np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(a, mode="L").save(path)

