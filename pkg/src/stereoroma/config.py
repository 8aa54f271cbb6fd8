"""Flat ``section.key = value`` run configuration with command-line overrides.

Every section maps onto one component config; values are typed from the
component defaults, validated by constructing the component, and echoed back
as a fully-resolved file for provenance.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

from .conditioning import NormSpec
from .datagen import SceneConfig
from .denoiser import DenoiserSpec, TrainConfig
from .geometry import GuidanceConfig
from .sgm import SgmParams


class ConfigError(ValueError):
    pass


# section -> (component class or None, extra keys with defaults)
SECTIONS = {
    "scene": (SceneConfig, {}),
    "sgm": (SgmParams, {}),
    "model": (DenoiserSpec, {}),
    "train": (TrainConfig, {}),
    "guidance": (GuidanceConfig, {}),
    "norm": (NormSpec, {}),
    "schedule": (None, {"kind": "cosine", "T": 128, "beta_start": 1e-4, "beta_end": 0.02}),
    "sampler": (None, {"steps": 16, "noise_kind": "pyramid", "chains": 1, "snapshots": False,
                       "clip_denoised": True}),
    "data": (None, {"n": 200, "train_fraction": 0.9, "split": "test"}),
    "eval": (None, {"z_min": 0.2, "z_max": 2.0, "invalid_as_failure": False, "pred_file": "disp.pfm"}),
    "paths": (None, {"data": "", "ckpt": "", "resume": "", "pred": "", "gt": "", "left": "", "right": "",
                     "disp": "", "camera": ""}),
    "output": (None, {"viz": False, "pointcloud": False}),
    "run": (None, {"seed": 0, "out": ""}),
}


def _defaults():
    out = {}
    for sec, (cls, extra) in SECTIONS.items():
        if cls is not None:
            for f in dataclasses.fields(cls):
                if f.default is not dataclasses.MISSING:
                    out[f"{sec}.{f.name}"] = f.default
                elif f.default_factory is not dataclasses.MISSING:
                    out[f"{sec}.{f.name}"] = f.default_factory()
        for k, v in extra.items():
            out[f"{sec}.{k}"] = v
    return out


DEFAULTS = _defaults()
# raw disparity for generated data uses the datagen preset, not the bare SGM defaults
DEFAULTS.update({"sgm.d_max": 24, "sgm.speckle_size": 40, "sgm.uniqueness_ratio": 0.9})


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(key, text, like):
    text = text.strip()
    try:
        if isinstance(like, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
        if isinstance(like, tuple):
            parts = text.replace("x", ",").split(",") if like and isinstance(like[0], int) else text.split(",")
            kind = type(like[0]) if like else float
            return tuple(kind(p) for p in parts)
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {type(like).__name__}") from None


class RunConfig:
    """Resolved key/value configuration; ``get`` / ``component`` accessors."""

    def __init__(self, values=None):
        self.values = dict(DEFAULTS)
        if values:
            self.update(values)

    def update(self, values):
        for k, v in values.items():
            if k not in DEFAULTS:
                raise ConfigError(f"unknown config key {k!r}")
            like = DEFAULTS[k]
            self.values[k] = _parse(k, v, like) if isinstance(v, str) and not isinstance(like, str) else v

    @classmethod
    def from_file(cls, path, overrides=None):
        vals = {}
        for n, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{n}: expected key = value")
            k, v = line.split("=", 1)
            vals[k.strip()] = v.strip()
        cfg = cls(vals)
        if overrides:
            cfg.update(overrides)
        return cfg

    def get(self, key):
        return self.values[key]

    def section(self, sec):
        pre = sec + "."
        return {k[len(pre):]: v for k, v in self.values.items() if k.startswith(pre)}

    def component(self, sec):
        cls = SECTIONS[sec][0]
        try:
            return cls(**self.section(sec))
        except (TypeError, ValueError) as e:
            raise ConfigError(f"[{sec}] {e}") from None

    def validate(self):
        for sec, (cls, _) in SECTIONS.items():
            if cls is not None:
                self.component(sec)
        if self.get("sampler.steps") > self.get("schedule.T") or self.get("sampler.steps") < 1:
            raise ConfigError("sampler.steps must be in [1, schedule.T]")
        if self.get("sampler.chains") < 1:
            raise ConfigError("sampler.chains must be >= 1")
        if not 0 < self.get("data.train_fraction") <= 1:
            raise ConfigError("data.train_fraction must be in (0, 1]")
        try:
            self.component("scene").validate_norm(self.get("norm.d_norm"))
        except ValueError as e:
            raise ConfigError(str(e)) from None
        return self

    def dumps(self):
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in sorted(self.values.items()))

    def echo(self, out_dir):
        p = Path(out_dir) / "config.txt"
        p.write_text(self.dumps())
        return p
