"""Desk-scale end-to-end experiment: train on procedural scenes, then compare
SGM raw, unguided and guided diffusion on a held-out split.

Set ``STEREOROMA_CACHE`` to a directory to keep datasets and checkpoints
between runs; cached checkpoints are keyed by their full configuration.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .conditioning import NormSpec
from .datagen import SceneConfig, default_sgm, make_sample, material_stats
from .denoiser import (Denoiser, DenoiserSpec, TrainConfig, TrainResult, load_params, prepare_dataset,
                       save_params, train)
from .diffusion import SamplerConfig, make_schedule, sample
from .geometry import GuidanceConfig
from .metrics import edge_band, epe, uncertainty_map

log = logging.getLogger(__name__)

TRANSPARENT = 3
# bump whenever generated data changes for an unchanged config, so cached
# checkpoints are not reused across incompatible datasets
DATA_REVISION = 2


def toy_scene_config():
    return SceneConfig(n_objects=4, material_mix=(0.2, 0.1, 0.7), object_size=(12.0, 28.0))


@dataclass(frozen=True)
class ToyConfig:
    n_train: int = 200
    n_test: int = 40
    scene: SceneConfig = field(default_factory=toy_scene_config)
    train_seed: int = 1
    test_seed: int = 2
    d_norm: float = 32.0
    base_width: int = 16
    depth: int = 3
    time_embed_dim: int = 64
    epochs: int = 60
    compare_epochs: int = 30
    learning_rate: float = 1e-3
    batch_size: int = 8
    seed: int = 0
    steps: int = 16
    scales: tuple = (0.5, 1.0, 2.0)
    tune_scenes: int = 8
    sample_seed: int = 1000
    uncertainty_runs: int = 10
    uncertainty_scenes: int = 20

    def spec(self, cond_mode="left+right+raw"):
        return DenoiserSpec(cond_mode, self.base_width, self.depth, self.time_embed_dim)

    def train_config(self, epochs):
        return TrainConfig(epochs=epochs, batch_size=self.batch_size, learning_rate=self.learning_rate,
                           crop=(self.scene.width, self.scene.height), seed=self.seed)

    @property
    def norm(self):
        return NormSpec(self.d_norm)


def _cache_dir():
    d = os.environ.get("STEREOROMA_CACHE")
    if not d:
        return None
    p = Path(d)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _key(*parts):
    blob = json.dumps(parts, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def make_splits(cfg: ToyConfig):
    train_set = [make_sample(cfg.scene, cfg.train_seed, i) for i in range(cfg.n_train)]
    test_set = [make_sample(cfg.scene, cfg.test_seed, i) for i in range(cfg.n_test)]
    return train_set, test_set


def train_variant(cfg: ToyConfig, train_set, cond_mode, epochs) -> TrainResult:
    """Train (or resume from the cache) one conditioning variant for ``epochs`` epochs."""
    spec = cfg.spec(cond_mode)
    sched = make_schedule(T=128)
    tcfg = cfg.train_config(epochs)
    cache = _cache_dir()
    key = _key(DATA_REVISION, asdict(cfg.scene), default_sgm(cfg.scene).to_dict(), cfg.n_train, cfg.train_seed,
               cfg.d_norm, spec.to_dict(),
               replace(tcfg, epochs=0).to_dict())
    path = cache / f"ckpt_{cond_mode.replace('+', '-')}_{key}.bin" if cache else None
    resume = None
    if path is not None and path.exists():
        resume = load_params(path, spec).train_result()
        if resume.epoch >= epochs:
            return TrainResult(resume.params, resume.losses[:epochs], resume.opt, resume.epoch)

    def checkpoint(res):
        if path is not None:
            save_params(path, res.params, spec, sched, cfg.norm, res.opt, res.epoch, res.losses)

    data = prepare_dataset(train_set, spec, cfg.norm)
    return train(data, spec, tcfg, sched, resume=resume, on_epoch=checkpoint)


def sampler(cfg: ToyConfig, den: Denoiser, s, seed):
    g = GuidanceConfig(mode="none") if s == 0 else GuidanceConfig(s=s)
    return SamplerConfig(steps=cfg.steps, schedule=den.schedule, guidance=g, seed=seed, norm=cfg.norm)


def predict(cfg, den, sample_, s, seed, chains=1):
    return [r.disparity for r in sample(den, sample_.frame, sampler(cfg, den, s, seed), chains=chains)]


def tune_scale(cfg: ToyConfig, den: Denoiser, train_set):
    """Pick the signed guidance scale with the lowest mean EPE on training scenes."""
    scenes = train_set[: cfg.tune_scenes]
    table = {}
    for s in [v for a in cfg.scales for v in (a, -a)]:
        errs = [epe(predict(cfg, den, sc, s, cfg.sample_seed + 7919 + i)[0], sc.gt) for i, sc in enumerate(scenes)]
        table[s] = float(np.mean(errs))
    best = min(table, key=lambda k: (table[k], -k))
    return best, table


def first_epoch_reaching(losses, target):
    for i, v in enumerate(losses):
        if v <= target:
            return i + 1
    return None


def run(cfg: ToyConfig | None = None, out_dir=None):
    """Full experiment; returns a JSON-serialisable result dict."""
    cfg = cfg or ToyConfig()
    t0 = time.time()
    train_set, test_set = make_splits(cfg)
    res = {"config": {k: (asdict(v) if hasattr(v, "__dataclass_fields__") else v)
                      for k, v in asdict(cfg).items()}}
    res["material_fraction_train"] = material_stats(train_set)
    res["material_fraction_test"] = material_stats(test_set)

    raw_run = train_variant(cfg, train_set, "left+right+raw", cfg.epochs)
    plain_run = train_variant(cfg, train_set, "left+right", cfg.compare_epochs)
    res["loss_raw"] = raw_run.losses
    res["loss_left_right"] = plain_run.losses
    target = plain_run.losses[cfg.compare_epochs - 1]
    res["convergence"] = {"target_loss": target,
                          "raw_epochs_to_target": first_epoch_reaching(raw_run.losses, target),
                          "left_right_epochs": cfg.compare_epochs}
    res["t_train"] = time.time() - t0

    den = Denoiser(cfg.spec(), raw_run.params, make_schedule(T=128), cfg.norm)
    best_s, table = tune_scale(cfg, den, train_set)
    res["guidance_tuning"] = {"table": {str(k): v for k, v in table.items()}, "best_s": best_s}

    rows = []
    for i, sc in enumerate(test_set):
        seed = cfg.sample_seed + i
        unguided = predict(cfg, den, sc, 0.0, seed)[0]
        guided = predict(cfg, den, sc, best_s, seed)[0]
        tr = sc.material == TRANSPARENT
        row = {"index": i, "epe_unguided": epe(unguided, sc.gt), "epe_guided": epe(guided, sc.gt),
               "transparent_pixels": int(tr.sum())}
        if tr.any():
            row["epe_unguided_transparent"] = epe(unguided, sc.gt, tr)
            row["epe_guided_transparent"] = epe(guided, sc.gt, tr)
        if (tr & sc.frame.raw.valid).any():
            row["epe_sgm_transparent"] = epe(sc.frame.raw, sc.gt, tr)
        rows.append(row)
    res["test_rows"] = rows

    def mean_of(k):
        v = [r[k] for r in rows if k in r]
        return float(np.mean(v)) if v else float("nan")

    res["summary"] = {
        "epe_sgm_transparent": mean_of("epe_sgm_transparent"),
        "epe_diffusion_transparent": mean_of("epe_guided_transparent"),
        "epe_unguided_transparent": mean_of("epe_unguided_transparent"),
        "epe_unguided": mean_of("epe_unguided"),
        "epe_guided": mean_of("epe_guided"),
        "guided_win_fraction": float(np.mean([r["epe_guided"] <= r["epe_unguided"] for r in rows])),
    }

    unc = []
    for i, sc in enumerate(test_set[: cfg.uncertainty_scenes]):
        preds = predict(cfg, den, sc, best_s, cfg.sample_seed + 50000 + i, chains=cfg.uncertainty_runs)
        var = uncertainty_map(preds)
        band = edge_band(sc.gt, radius=2)
        if not band.any() or band.all():
            continue
        unc.append({"index": i, "edge": float(var[band].mean()), "flat": float(var[~band].mean())})
    res["uncertainty"] = unc
    res["uncertainty_edge_wins"] = float(np.mean([u["edge"] > u["flat"] for u in unc])) if unc else 0.0
    res["t_total"] = time.time() - t0
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "toy_experiment.json").write_text(json.dumps(res, indent=2, sort_keys=True))
    return res
