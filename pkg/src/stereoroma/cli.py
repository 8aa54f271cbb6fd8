"""Command-line pipeline: gen-data, sgm, train, infer, eval, pointcloud, viz.

Every command resolves a ``RunConfig`` (defaults < ``--config`` file <
``--set key=value`` < dedicated flags), validates it, writes it to
``<out>/config.txt`` and appends JSON lines to ``<out>/run.jsonl``. Rerunning
with ``--config <out>/config.txt`` repeats the run exactly.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig
from .datagen import DatasetError, make_sample, material_stats, read_dataset, read_sample, write_dataset
from .denoiser import (CheckpointError, TrainingDivergedError, TrainResult, load_params, prepare_dataset,
                       save_params, train)
from .diffusion import SamplerConfig, make_schedule, sample
from .frames import CameraIntrinsics, StereoFrame
from .geometry import backproject, disparity_to_depth, project, save_ply
from .imagecore import (DisparityMap, ImageFormatError, colorize_disparity, load_image, save_pfm, save_pgm,
                        save_png_gray)
from .metrics import epe, evaluate_run, mean_report, pooled, uncertainty_map, write_csv
from .sgm import compute_raw_disparity

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED = 0, 2, 3, 4


class InputError(IOError):
    """Missing or inconsistent input files."""


GUIDANCE_ALIASES = {"stereo": "stereo_photometric", "raw": "raw_sign", "none": "none"}

# flag -> (config key, type, help)
FLAGS = {
    "common": [("--seed", "run.seed", int, "base seed"), ("--out", "run.out", str, "output directory")],
    "gen-data": [("--n", "data.n", int, "number of scenes"), ("--size", None, str, "WxH, e.g. 64x64"),
                 ("--train-fraction", "data.train_fraction", float, "leading share of scenes used for training")],
    "sgm": [("--data", "paths.data", str, "dataset or sample directory"),
            ("--left", "paths.left", str, "left image"), ("--right", "paths.right", str, "right image"),
            ("--gt", "paths.gt", str, "optional gt disparity PFM for a pair"),
            ("--d-max", "sgm.d_max", int, "disparity search range"),
            ("--viz", "output.viz", "flag", "also write pseudo-colour PNGs")],
    "train": [("--data", "paths.data", str, "dataset directory"), ("--cond", "model.cond_mode", str, "conditioning"),
              ("--epochs", "train.epochs", int, ""), ("--lr", "train.learning_rate", float, ""),
              ("--batch", "train.batch_size", int, ""), ("--base-width", "model.base_width", int, ""),
              ("--d-norm", "norm.d_norm", float, ""), ("--resume", "paths.resume", str, "checkpoint to resume")],
    "infer": [("--ckpt", "paths.ckpt", str, "checkpoint"), ("--data", "paths.data", str, "dataset or sample dir"),
              ("--split", "data.split", str, "train, test or all"),
              ("--guidance", "guidance.mode", str, "stereo, raw or none"), ("--s", "guidance.s", float, ""),
              ("--alpha", "guidance.alpha", float, ""), ("--steps", "sampler.steps", int, ""),
              ("--uncertainty", "sampler.chains", int, "number of runs for the variance map"),
              ("--pointcloud", "output.pointcloud", "flag", ""), ("--snapshots", "sampler.snapshots", "flag", ""),
              ("--viz", "output.viz", "flag", "")],
    "eval": [("--pred", "paths.pred", str, "prediction directory"), ("--gt", "paths.gt", str, "dataset directory"),
             ("--pred-file", "eval.pred_file", str, "file name inside each sample dir"),
             ("--invalid-as-failure", "eval.invalid_as_failure", "flag", "")],
    "pointcloud": [("--disp", "paths.disp", str, "disparity PFM"),
                   ("--camera", "paths.camera", str, "meta.json or sample dir with the intrinsics"),
                   ("--data", "paths.data", str, "sample dir for colours")],
    "viz": [("--disp", "paths.disp", str, "disparity PFM"), ("--data", "paths.data", str, "dataset or sample dir"),
            ("--d-max", "norm.d_norm", float, "colour scale maximum")],
}


def build_parser():
    p = argparse.ArgumentParser(prog="stereoroma", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("gen-data", "sgm", "train", "infer", "eval", "pointcloud", "viz"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="key = value file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
        for flag, key, typ, hlp in FLAGS["common"] + FLAGS[name]:
            dest = flag.lstrip("-").replace("-", "_")
            if typ == "flag":
                sp.add_argument(flag, dest=dest, action="store_true", default=None, help=hlp)
            else:
                sp.add_argument(flag, dest=dest, type=typ, default=None, help=hlp)
    return p


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    sets = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        sets[k.strip()] = v.strip()
    cfg.update(sets)
    for flag, key, typ, _ in FLAGS["common"] + FLAGS[args.command]:
        val = getattr(args, flag.lstrip("-").replace("-", "_"), None)
        if val is None:
            continue
        if flag == "--size":
            try:
                w, h = (int(x) for x in val.lower().split("x"))
            except ValueError:
                raise ConfigError(f"--size expects WxH, got {val!r}") from None
            cfg.update({"scene.width": w, "scene.height": h})
        elif key == "guidance.mode":
            if val not in GUIDANCE_ALIASES:
                raise ConfigError(f"--guidance must be one of {sorted(GUIDANCE_ALIASES)}")
            cfg.update({key: GUIDANCE_ALIASES[val]})
        else:
            cfg.update({key: val})
    if not cfg.get("run.out"):
        stamp = time.strftime("%Y%m%d-%H%M%S")
        cfg.update({"run.out": str(Path("runs") / f"{stamp}_seed{cfg.get('run.seed')}")})
    return cfg.validate()


class Run:
    """Output directory, echoed config and JSONL report for one command."""

    def __init__(self, cfg: RunConfig, command):
        self.cfg = cfg
        self.out = Path(cfg.get("run.out"))
        self.out.mkdir(parents=True, exist_ok=True)
        cfg.echo(self.out)
        self.report = self.out / "run.jsonl"
        self.report.write_text("")
        self.log({"command": command})

    def log(self, rec):
        with open(self.report, "a") as f:
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def _schedule(cfg):
    return make_schedule(cfg.get("schedule.kind"), cfg.get("schedule.T"), cfg.get("schedule.beta_start"),
                         cfg.get("schedule.beta_end"))


def _samples_in(path, split=None):
    """Sample directories under a dataset root, or the directory itself if it is a sample."""
    p = Path(path)
    if not p.exists():
        raise InputError(f"{p}: no such directory")
    if (p / "meta.json").exists():
        return [p]
    man = p / "manifest.json"
    if not man.exists():
        raise InputError(f"{p}: neither a sample directory nor a dataset (no manifest.json)")
    m = json.loads(man.read_text())
    names = m["train"] + m["test"] if split in (None, "all") else m[split]
    return [p / n for n in names]


def _camera(path):
    p = Path(path)
    meta = p / "meta.json" if p.is_dir() else p
    if not meta.exists():
        raise InputError(f"{meta}: camera metadata not found")
    cam = json.loads(meta.read_text()).get("camera")
    if not cam:
        raise InputError(f"{meta}: no camera entry")
    return CameraIntrinsics(**cam)


# ------------------------------------------------------------- commands

def cmd_gen_data(cfg: RunConfig):
    scene = cfg.component("scene")
    sgm = cfg.component("sgm")
    run = Run(cfg, "gen-data")
    n, seed = cfg.get("data.n"), cfg.get("run.seed")
    samples = [make_sample(scene, seed, i, sgm) for i in range(n)]
    manifest = write_dataset(run.out, samples, scene, seed, cfg.get("data.train_fraction"), sgm)
    stats = material_stats(samples)
    run.log({"samples": n, "train": len(manifest["train"]), "test": len(manifest["test"]), "material": stats})
    print(f"wrote {n} samples to {run.out}")
    for k, v in stats.items():
        print(f"  {k:12s} {100 * v:6.2f}% of pixels")
    return EXIT_OK


def cmd_sgm(cfg: RunConfig):
    params = cfg.component("sgm")
    jobs = []
    if cfg.get("paths.data"):
        for d in _samples_in(cfg.get("paths.data"), "all"):
            s = read_sample(d)
            jobs.append((d.name, s.frame, s.gt))
    else:
        left, right = cfg.get("paths.left"), cfg.get("paths.right")
        if not left or not Path(left).exists():
            raise InputError(f"left image missing: {left!r}")
        if not right or not Path(right).exists():
            raise InputError(f"right image missing: {right!r}")
        gt = None
        if cfg.get("paths.gt"):
            gt = DisparityMap(load_image(cfg.get("paths.gt")).astype(np.float64))
        jobs.append(("pair", StereoFrame(load_image(left), load_image(right)), gt))
    run = Run(cfg, "sgm")
    for name, frame, gt in jobs:
        raw = compute_raw_disparity(frame, params)
        d = run.out / name
        d.mkdir(exist_ok=True)
        save_pfm(raw.values.astype(np.float32), d / "raw.pfm")
        save_pgm(raw.valid.astype(np.uint8) * 255, d / "valid.pgm")
        if cfg.get("output.viz"):
            colorize_disparity(raw, params.d_max, d / "raw.png")
        rec = {"sample": name, "valid_fraction": float(raw.valid.mean())}
        if gt is not None and (raw.valid & gt.valid).any():
            rec["epe"] = epe(raw, gt)
            print(f"{name}: EPE {rec['epe']:.3f} px, valid {100 * rec['valid_fraction']:.1f}%")
        run.log(rec)
    return EXIT_OK


def cmd_train(cfg: RunConfig):
    spec, tcfg, norm = cfg.component("model"), cfg.component("train"), cfg.component("norm")
    if not cfg.get("paths.data"):
        raise InputError("train needs --data")
    samples = read_dataset(cfg.get("paths.data"), "train")
    sched = _schedule(cfg)
    resume = None
    if cfg.get("paths.resume"):
        resume = load_params(cfg.get("paths.resume"), spec).train_result()
    run = Run(cfg, "train")
    data = prepare_dataset(samples, spec, norm)
    ckpt = run.out / "checkpoint.bin"

    def on_epoch(res: TrainResult):
        save_params(ckpt, res.params, spec, sched, norm, res.opt, res.epoch, res.losses)
        run.log({"epoch": res.epoch, "loss": res.losses[-1]})

    try:
        res = train(data, spec, tcfg, sched, resume=resume, on_epoch=on_epoch)
    except TrainingDivergedError as e:
        save_params(run.out / "last_good.bin", e.last_good, spec, sched, norm)
        raise
    with open(run.out / "loss.csv", "w") as f:
        f.write("epoch,loss\n")
        for i, v in enumerate(res.losses, 1):
            f.write(f"{i},{float(v)!r}\n")
    print(f"trained {res.epoch} epochs, final loss {res.losses[-1]:.5f}; checkpoint {ckpt}")
    return EXIT_OK


def cmd_infer(cfg: RunConfig):
    if not cfg.get("paths.ckpt"):
        raise InputError("infer needs --ckpt")
    if not cfg.get("paths.data"):
        raise InputError("infer needs --data")
    ck = load_params(cfg.get("paths.ckpt"))
    den = ck.denoiser()
    dirs = _samples_in(cfg.get("paths.data"), cfg.get("data.split"))
    gcfg = cfg.component("guidance")
    chains = cfg.get("sampler.chains")
    run = Run(cfg, "infer")
    for idx, d in enumerate(dirs):
        s = read_sample(d)
        scfg = SamplerConfig(steps=cfg.get("sampler.steps"), schedule=den.schedule, guidance=gcfg,
                             seed=cfg.get("run.seed") * 1_000_003 + idx, noise_kind=cfg.get("sampler.noise_kind"),
                             norm=den.norm, clip_denoised=cfg.get("sampler.clip_denoised"))
        results = sample(den, s.frame, scfg, chains=chains)
        od = run.out / d.name
        od.mkdir(exist_ok=True)
        disp = results[0].disparity
        save_pfm(disp.values.astype(np.float32), od / "disp.pfm")
        cam = s.frame.cam
        depth = disparity_to_depth(disp, cam) if cam else None
        if depth is not None:
            save_pfm(depth.values.astype(np.float32), od / "depth.pfm")
        if cfg.get("output.viz"):
            colorize_disparity(disp, den.norm.d_norm, od / "disp.png")
        with open(od / "report.jsonl", "w") as f:
            for rec in results[0].report:
                f.write(json.dumps(rec, sort_keys=True) + "\n")
        if cfg.get("sampler.snapshots"):
            sd = od / "snapshots"
            sd.mkdir(exist_ok=True)
            for step, t, field in results[0].snapshots:
                colorize_disparity(DisparityMap(field), den.norm.d_norm, sd / f"step{step:04d}_t{t:04d}.png")
        if chains > 1:
            var = uncertainty_map([r.disparity for r in results])
            save_pfm(var.astype(np.float32), od / "variance.pfm")
        if cfg.get("output.pointcloud") and depth is not None:
            cloud = backproject(depth, cam, s.frame.left)
            save_ply(cloud, od / "cloud.ply")
        rec = {"sample": d.name, "epe": epe(disp, s.gt)}
        run.log(rec)
        print(f"{d.name}: EPE {rec['epe']:.3f} px")
    return EXIT_OK


def cmd_eval(cfg: RunConfig):
    pred_root, gt_root = cfg.get("paths.pred"), cfg.get("paths.gt")
    if not pred_root or not gt_root:
        raise InputError("eval needs --pred and --gt")
    gt_dirs = _samples_in(gt_root, cfg.get("data.split"))
    pname = cfg.get("eval.pred_file")
    missing = [d.name for d in gt_dirs if not (Path(pred_root) / d.name / pname).exists()]
    if missing:
        raise InputError(f"predictions missing for {len(missing)} samples: {', '.join(missing)}")
    z_range = (cfg.get("eval.z_min"), cfg.get("eval.z_max"))
    iaf = cfg.get("eval.invalid_as_failure")
    run = Run(cfg, "eval")
    names, reports, preds, gts = [], [], [], []
    for d in gt_dirs:
        s = read_sample(d)
        pv = load_image(Path(pred_root) / d.name / pname).astype(np.float64)
        vpath = Path(pred_root) / d.name / "valid.pgm"
        valid = load_image(vpath) > 0.5 if pname == "raw.pfm" and vpath.exists() else np.isfinite(pv)
        pred = DisparityMap(pv, valid)
        r = evaluate_run(pred, s.gt, s.frame.cam, z_range, invalid_as_failure=iaf)
        names.append(d.name)
        reports.append(r)
        preds.append(pred)
        gts.append(s.gt)
        run.log({"sample": d.name, **r.to_dict()})
    cam = read_sample(gt_dirs[0]).frame.cam
    pp, pg = pooled(preds, gts)
    pooled_report = evaluate_run(pp, pg, cam, z_range, invalid_as_failure=iaf)
    write_csv(run.out / "eval.csv", names, reports, [("pooled", pooled_report.to_dict())])
    summary = {"pooled": pooled_report.to_dict(), "per_image_mean": mean_report(reports), "n_samples": len(names)}
    (run.out / "report.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    print(f"EPE {pooled_report.epe:.4f} px  RMSE {pooled_report.rmse:.4f} m  "
          f"d1.05 {pooled_report.delta_105:.2f}%  over {len(names)} samples")
    return EXIT_OK


def cmd_pointcloud(cfg: RunConfig):
    disp_path = cfg.get("paths.disp")
    if not disp_path or not Path(disp_path).exists():
        raise InputError(f"disparity file missing: {disp_path!r}")
    cam_src = cfg.get("paths.camera") or cfg.get("paths.data")
    if not cam_src:
        raise InputError("pointcloud needs --camera or --data for the intrinsics")
    cam = _camera(cam_src)
    disp = DisparityMap(load_image(disp_path).astype(np.float64))
    color = None
    if cfg.get("paths.data"):
        color = load_image(Path(cfg.get("paths.data")) / "left.pfm")
    run = Run(cfg, "pointcloud")
    depth = disparity_to_depth(disp, cam)
    cloud = backproject(depth, cam, color)
    save_ply(cloud, run.out / "cloud.ply")
    err = float(np.abs(project(cloud.points, cam) - cloud.pixels).max()) if len(cloud.points) else 0.0
    run.log({"points": int(len(cloud.points)), "reprojection_max_px": err})
    print(f"{len(cloud.points)} points, max reprojection error {err:.2e} px")
    return EXIT_OK


def cmd_viz(cfg: RunConfig):
    d_max = cfg.get("norm.d_norm")
    run = Run(cfg, "viz")
    if cfg.get("paths.disp"):
        p = Path(cfg.get("paths.disp"))
        if not p.exists():
            raise InputError(f"disparity file missing: {p}")
        colorize_disparity(DisparityMap(load_image(p).astype(np.float64)), d_max, run.out / (p.stem + ".png"))
        return EXIT_OK
    if not cfg.get("paths.data"):
        raise InputError("viz needs --disp or --data")
    for d in _samples_in(cfg.get("paths.data"), "all"):
        s = read_sample(d)
        od = run.out / d.name
        od.mkdir(exist_ok=True)
        save_png_gray(s.frame.left, od / "left.png")
        save_png_gray(s.frame.right, od / "right.png")
        colorize_disparity(s.gt, d_max, od / "gt.png")
        colorize_disparity(s.frame.raw, d_max, od / "raw.png")
        save_png_gray(s.material / 3.0, od / "material.png")
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "sgm": cmd_sgm, "train": cmd_train, "infer": cmd_infer,
            "eval": cmd_eval, "pointcloud": cmd_pointcloud, "viz": cmd_viz}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDivergedError as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (InputError, DatasetError, CheckpointError, ImageFormatError, OSError) as e:
        print(f"io error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
