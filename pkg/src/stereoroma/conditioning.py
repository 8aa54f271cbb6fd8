"""Conditioning-mode strings and the stacked conditioning tensor."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .frames import StereoFrame

_TOKEN_CHANNELS = {"left": 1, "right": 1, "raw": 2, "color": 3}
_ORDER = ("color", "left", "right", "raw")


class ConditioningError(ValueError):
    pass


@dataclass(frozen=True)
class NormSpec:
    d_norm: float = 192.0

    def __post_init__(self):
        if self.d_norm <= 0:
            raise ValueError("d_norm must be positive")

    def normalize(self, disp):
        """Map [0, d_norm] px to [-1, 1]; returns (field, n_clipped)."""
        d = np.asarray(disp, dtype=np.float64)
        n_clipped = int(np.count_nonzero(d > self.d_norm))
        d = np.clip(d, 0.0, self.d_norm)
        return 2.0 * d / self.d_norm - 1.0, n_clipped

    def denormalize(self, x):
        return (np.asarray(x, dtype=np.float64) + 1.0) * (self.d_norm / 2.0)

    @property
    def grad_factor(self):
        """d(pixel disparity)/d(normalized value); multiplies pixel-space gradients."""
        return self.d_norm / 2.0


def parse_mode(mode: str):
    tokens = [t.strip() for t in mode.split("+") if t.strip()]
    if not tokens:
        raise ConditioningError("empty conditioning mode")
    for t in tokens:
        if t not in _TOKEN_CHANNELS:
            raise ConditioningError(f"unknown conditioning token {t!r}")
    if len(set(tokens)) != len(tokens):
        raise ConditioningError(f"duplicate token in {mode!r}")
    return tuple(t for t in _ORDER if t in tokens)


def canonical_mode(mode: str) -> str:
    return "+".join(parse_mode(mode))


def condition_channels(mode: str) -> int:
    return sum(_TOKEN_CHANNELS[t] for t in parse_mode(mode))


def in_channels(mode: str) -> int:
    """x_t plus the conditioning channels."""
    return 1 + condition_channels(mode)


def make_condition(frame: StereoFrame, mode: str, norm: NormSpec) -> np.ndarray:
    """(H, W, C) float32 stack. Invalid raw pixels become 0 with a validity channel."""
    parts = []
    for t in parse_mode(mode):
        if t == "left":
            parts.append(np.asarray(frame.left, dtype=np.float64)[:, :, None])
        elif t == "right":
            parts.append(np.asarray(frame.right, dtype=np.float64)[:, :, None])
        elif t == "color":
            if frame.color is None:
                raise ConditioningError("mode needs a color image but the frame has none")
            c = np.asarray(frame.color, dtype=np.float64)
            if c.ndim == 2:
                c = np.repeat(c[:, :, None], 3, axis=2)
            parts.append(c)
        elif t == "raw":
            if frame.raw is None:
                raise ConditioningError("mode needs raw disparity but the frame has none")
            x, _ = norm.normalize(frame.raw.values)
            valid = frame.raw.valid
            parts.append(np.where(valid, x, 0.0)[:, :, None])
            parts.append(valid.astype(np.float64)[:, :, None])
    return np.concatenate(parts, axis=2).astype(np.float32)
