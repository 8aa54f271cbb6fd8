"""Disparity and depth error metrics, delta accuracy and sample-variance uncertainty."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, fields

import numpy as np

from .frames import CameraIntrinsics
from .geometry import DepthMap, disparity_to_depth
from .imagecore import DisparityMap

REPORT_SCHEMA = 1
DELTAS = (1.05, 1.10, 1.25)
DEPTH_RANGE = (0.2, 2.0)


class EmptyMaskError(ValueError):
    pass


def _check(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")


def epe(pred: DisparityMap, gt: DisparityMap, mask=None, invalid_as_failure=False) -> float:
    """Mean absolute disparity error over pixels valid in both maps (and ``mask``).

    With ``invalid_as_failure`` the prediction's validity is ignored and a
    missing prediction counts as disparity 0.
    """
    _check(pred.values, gt.values)
    m = gt.valid.copy() if invalid_as_failure else gt.valid & pred.valid
    if mask is not None:
        m &= np.asarray(mask, dtype=bool)
    if not m.any():
        raise EmptyMaskError("no pixels to evaluate")
    p = np.where(pred.valid, pred.values, 0.0) if invalid_as_failure else pred.values
    return float(np.abs(p[m] - gt.values[m]).mean())


def _depth_mask(pred: DepthMap, gt: DepthMap, z_range, mask):
    _check(pred.values, gt.values)
    lo, hi = z_range
    m = gt.valid & pred.valid & (pred.values > 0) & (gt.values >= lo) & (gt.values <= hi)
    if mask is not None:
        m &= np.asarray(mask, dtype=bool)
    return m


def depth_metrics(pred: DepthMap, gt: DepthMap, z_range=DEPTH_RANGE, mask=None):
    """(rmse, mae, rel) over pixels whose gt depth lies in ``z_range``."""
    m = _depth_mask(pred, gt, z_range, mask)
    if not m.any():
        raise EmptyMaskError("no pixels with gt depth in range")
    p, g = pred.values[m], gt.values[m]
    err = p - g
    return float(np.sqrt(np.mean(err * err))), float(np.mean(np.abs(err))), float(np.mean(np.abs(err) / g))


def delta_accuracy(pred: DepthMap, gt: DepthMap, thresholds=DELTAS, z_range=DEPTH_RANGE, mask=None,
                   invalid_as_failure=False):
    """Percentage of in-range pixels with max(p/g, g/p) < threshold, per threshold.

    With ``invalid_as_failure`` every in-range gt pixel counts and pixels
    without a usable prediction fail all thresholds.
    """
    lo, hi = z_range
    base = gt.valid & (gt.values >= lo) & (gt.values <= hi)
    if mask is not None:
        base &= np.asarray(mask, dtype=bool)
    have = _depth_mask(pred, gt, z_range, mask)
    denom = base if invalid_as_failure else have
    n = int(denom.sum())
    if n == 0:
        return tuple(0.0 for _ in thresholds)
    p, g = pred.values[have], gt.values[have]
    ratio = np.maximum(p / g, g / p)
    return tuple(float(100.0 * np.count_nonzero(ratio < t) / n) for t in thresholds)


def uncertainty_map(samples) -> np.ndarray:
    """Unbiased per-pixel variance over repeated predictions."""
    samples = list(samples)
    if len(samples) < 2:
        raise ValueError("need at least two samples for a variance")
    stack = np.stack([s.values if isinstance(s, DisparityMap) else np.asarray(s, float) for s in samples])
    return stack.var(axis=0, ddof=1)


def edge_band(gt: DisparityMap, radius=2, jump=1.0) -> np.ndarray:
    """Pixels within ``radius`` (Chebyshev) of a gt disparity jump larger than ``jump``."""
    d = gt.values
    edge = np.zeros(d.shape, dtype=bool)
    dx = np.abs(np.diff(d, axis=1)) > jump
    dy = np.abs(np.diff(d, axis=0)) > jump
    edge[:, :-1] |= dx
    edge[:, 1:] |= dx
    edge[:-1, :] |= dy
    edge[1:, :] |= dy
    out = np.zeros_like(edge)
    h, w = d.shape
    for oy in range(-radius, radius + 1):
        for ox in range(-radius, radius + 1):
            ys = slice(max(0, oy), h + min(0, oy))
            yd = slice(max(0, -oy), h + min(0, -oy))
            xs = slice(max(0, ox), w + min(0, ox))
            xd = slice(max(0, -ox), w + min(0, -ox))
            out[yd, xd] |= edge[ys, xs]
    return out


@dataclass(frozen=True)
class EvalReport:
    epe: float
    rmse: float
    mae: float
    rel: float
    delta_105: float
    delta_110: float
    delta_125: float
    valid_fraction: float
    n_pixels: int

    def to_dict(self):
        d = asdict(self)
        d["schema_version"] = REPORT_SCHEMA
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        if d.pop("schema_version", None) != REPORT_SCHEMA:
            raise ValueError("report schema version mismatch")
        return cls(**d)

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


def evaluate_run(pred: DisparityMap, gt: DisparityMap, cam: CameraIntrinsics, z_range=DEPTH_RANGE,
                 mask=None, invalid_as_failure=False, min_disp=0.1) -> EvalReport:
    """All metrics for one prediction; disparity errors in px, depth errors in m."""
    _check(pred.values, gt.values)
    m = gt.valid if mask is None else gt.valid & np.asarray(mask, dtype=bool)
    n_eval = int(m.sum()) if invalid_as_failure else int((m & pred.valid).sum())
    e = epe(pred, gt, mask, invalid_as_failure)
    pd, gd = disparity_to_depth(pred, cam, min_disp), disparity_to_depth(gt, cam, min_disp)
    try:
        rmse, mae, rel = depth_metrics(pd, gd, z_range, mask)
    except EmptyMaskError:
        rmse = mae = rel = 0.0
    d105, d110, d125 = delta_accuracy(pd, gd, DELTAS, z_range, mask, invalid_as_failure)
    vf = float((pred.valid & m).sum() / max(int(m.sum()), 1))
    return EvalReport(e, rmse, mae, rel, d105, d110, d125, vf, n_eval)


def pooled(preds, gts):
    """Concatenate several maps into one 1-row map so metrics pool over pixels."""
    p = DisparityMap(np.concatenate([x.values.ravel() for x in preds])[None, :],
                     np.concatenate([x.valid.ravel() for x in preds])[None, :])
    g = DisparityMap(np.concatenate([x.values.ravel() for x in gts])[None, :],
                     np.concatenate([x.valid.ravel() for x in gts])[None, :])
    return p, g


def mean_report(reports) -> dict:
    names = EvalReport.field_names()
    return {n: float(np.mean([getattr(r, n) for r in reports])) for n in names}


def write_csv(path, names, reports, extra_rows=()):
    """One row per sample, then a ``mean`` row, then any ``(label, dict)`` extras."""
    cols = EvalReport.field_names()
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["sample"] + cols)
        for name, r in zip(names, reports):
            w.writerow([name] + [repr(getattr(r, c)) for c in cols])
        if reports:
            m = mean_report(reports)
            w.writerow(["mean"] + [repr(m[c]) for c in cols])
        for label, d in extra_rows:
            w.writerow([label] + [repr(d[c]) for c in cols])
