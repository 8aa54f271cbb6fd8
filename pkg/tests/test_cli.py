import json
from pathlib import Path

import numpy as np
import pytest

from stereoroma.cli import EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO, EXIT_OK, main
from stereoroma.imagecore import load_image

SMALL = ["--size", "32x32", "--set", "scene.disparity_range=2,12", "--set", "norm.d_norm=32",
         "--set", "sgm.d_max=16"]
TINY_MODEL = ["--set", "train.crop=32,32", "--set", "model.depth=2", "--set", "model.time_embed_dim=8",
              "--set", "schedule.T=16", "--set", "sampler.steps=4"]


def files(root):
    root = Path(root)
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def rerun_matches(out, again):
    """Rerunning from the echoed config reproduces every output byte for byte."""
    a, b = files(out), files(again)
    assert set(a) == set(b)
    for name in a:
        if name == "config.txt":
            strip = [ln for ln in a[name].decode().splitlines() if not ln.startswith("run.out")]
            assert strip == [ln for ln in b[name].decode().splitlines() if not ln.startswith("run.out")]
        else:
            assert a[name] == b[name], name


def rerun(cmd, out, tmp):
    again = tmp / (Path(out).name + "_again")
    assert main([cmd, "--config", str(Path(out) / "config.txt"), "--out", str(again)]) == EXIT_OK
    rerun_matches(out, again)


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def dataset(work):
    out = work / "data"
    assert main(["gen-data", "--n", "4", "--seed", "3", "--out", str(out), "--train-fraction", "0.5"] + SMALL) == 0
    return out


@pytest.fixture(scope="module")
def checkpoint(work, dataset):
    out = work / "train"
    args = ["train", "--data", str(dataset), "--epochs", "2", "--base-width", "2", "--d-norm", "32",
            "--out", str(out)] + TINY_MODEL
    assert main(args) == EXIT_OK
    return out


def test_gen_data_outputs(dataset, work):
    man = json.loads((dataset / "manifest.json").read_text())
    assert man["n"] == 4 and len(man["train"]) == 2 and len(man["test"]) == 2
    s = dataset / "sample_00000"
    for f in ("left.pfm", "right.pfm", "gt.pfm", "raw.pfm", "valid.pgm", "material.pgm", "meta.json"):
        assert (s / f).exists()
    assert load_image(s / "left.pfm").shape == (32, 32)
    assert (dataset / "config.txt").exists() and (dataset / "run.jsonl").exists()
    rerun("gen-data", dataset, work)


def test_sgm_on_dataset_and_pair(dataset, work):
    out = work / "sgm"
    assert main(["sgm", "--data", str(dataset), "--out", str(out), "--viz", "--d-max", "16"]) == EXIT_OK
    assert (out / "sample_00001" / "raw.pfm").exists() and (out / "sample_00001" / "raw.png").exists()
    recs = [json.loads(x) for x in (out / "run.jsonl").read_text().splitlines()]
    assert recs[0] == {"command": "sgm"} and all("epe" in r for r in recs[1:])
    rerun("sgm", out, work)
    s = dataset / "sample_00000"
    pair = work / "pair"
    assert main(["sgm", "--left", str(s / "left.pfm"), "--right", str(s / "right.pfm"), "--gt", str(s / "gt.pfm"),
                 "--out", str(pair), "--d-max", "16"]) == EXIT_OK
    np.testing.assert_array_equal(load_image(pair / "pair" / "raw.pfm"), load_image(s / "raw.pfm"))


def test_sgm_missing_right_image(dataset, work, capsys):
    s = dataset / "sample_00000"
    code = main(["sgm", "--left", str(s / "left.pfm"), "--right", str(s / "nope.pfm"), "--out", str(work / "x")])
    assert code == EXIT_IO and "right image missing" in capsys.readouterr().err


def test_train_outputs_and_resume(checkpoint, dataset, work):
    loss = (checkpoint / "loss.csv").read_text().splitlines()
    assert loss[0] == "epoch,loss" and len(loss) == 3
    rerun("train", checkpoint, work)
    # one epoch, then resume to two: same checkpoint as the straight run
    first = work / "train1"
    base = ["train", "--data", str(dataset), "--base-width", "2", "--d-norm", "32"] + TINY_MODEL
    assert main(base + ["--epochs", "1", "--out", str(first)]) == EXIT_OK
    second = work / "train2"
    assert main(base + ["--epochs", "2", "--out", str(second), "--resume", str(first / "checkpoint.bin")]) == EXIT_OK
    assert (second / "checkpoint.bin").read_bytes() == (checkpoint / "checkpoint.bin").read_bytes()


def test_train_divergence_exit_code(dataset, work):
    out = work / "diverge"
    args = ["train", "--data", str(dataset), "--epochs", "3", "--base-width", "2", "--d-norm", "32",
            "--lr", "1e38", "--out", str(out)] + TINY_MODEL
    with np.errstate(all="ignore"):
        assert main(args) == EXIT_DIVERGED
    assert (out / "last_good.bin").exists()


def test_infer_eval_pointcloud_viz(checkpoint, dataset, work):
    inf = work / "infer"
    args = ["infer", "--ckpt", str(checkpoint / "checkpoint.bin"), "--data", str(dataset), "--split", "test",
            "--guidance", "stereo", "--s", "0.5", "--uncertainty", "2", "--pointcloud", "--snapshots", "--viz",
            "--out", str(inf), "--seed", "5", "--steps", "4"]
    assert main(args) == EXIT_OK
    d = inf / "sample_00002"
    for f in ("disp.pfm", "depth.pfm", "disp.png", "report.jsonl", "variance.pfm", "cloud.ply"):
        assert (d / f).exists(), f
    assert len(list((d / "snapshots").glob("*.png"))) == 4
    assert len((d / "report.jsonl").read_text().splitlines()) == 4
    rerun("infer", inf, work)

    ev = work / "eval"
    assert main(["eval", "--pred", str(inf), "--gt", str(dataset), "--set", "data.split=test",
                 "--out", str(ev)]) == EXIT_OK
    report = json.loads((ev / "report.json").read_text())
    assert report["n_samples"] == 2 and report["pooled"]["epe"] >= 0
    rows = (ev / "eval.csv").read_text().splitlines()
    assert [r.split(",")[0] for r in rows] == ["sample", "sample_00002", "sample_00003", "mean", "pooled"]
    rerun("eval", ev, work)

    pc = work / "pc"
    assert main(["pointcloud", "--disp", str(d / "disp.pfm"), "--data", str(dataset / "sample_00002"),
                 "--out", str(pc)]) == EXIT_OK
    rec = json.loads((pc / "run.jsonl").read_text().splitlines()[1])
    assert rec["points"] > 0 and rec["reprojection_max_px"] < 1e-6

    vz = work / "viz"
    assert main(["viz", "--data", str(dataset), "--out", str(vz)]) == EXIT_OK
    assert len(list(vz.rglob("*.png"))) == 4 * 5


def test_eval_pred_equal_gt_is_perfect(dataset, work):
    ev = work / "eval_gt"
    assert main(["eval", "--pred", str(dataset), "--gt", str(dataset), "--pred-file", "gt.pfm",
                 "--out", str(ev)]) == EXIT_OK
    pooled = json.loads((ev / "report.json").read_text())["pooled"]
    assert pooled["epe"] == 0 and pooled["rmse"] == 0 and pooled["delta_105"] == 100.0


def test_eval_missing_predictions(dataset, work, capsys):
    code = main(["eval", "--pred", str(work / "empty"), "--gt", str(dataset), "--set", "data.split=all",
                 "--out", str(work / "ev_missing")])
    err = capsys.readouterr().err
    assert code == EXIT_IO and "sample_00000" in err and "sample_00003" in err
    assert not (work / "ev_missing").exists()


def test_config_errors_write_nothing(work, capsys):
    out = work / "bad"
    assert main(["gen-data", "--out", str(out), "--set", "scene.material_mix=0.5,0.5,0.5"]) == EXIT_CONFIG
    assert "material_mix" in capsys.readouterr().err
    assert not out.exists()
    assert main(["gen-data", "--out", str(out), "--set", "scene.nope=1"]) == EXIT_CONFIG
    assert main(["gen-data", "--out", str(out), "--size", "big"]) == EXIT_CONFIG
    assert main(["infer", "--out", str(out), "--guidance", "psychic"]) == EXIT_CONFIG
    assert not out.exists()


def test_missing_inputs(work):
    assert main(["train", "--out", str(work / "t0")]) == EXIT_IO
    assert main(["infer", "--ckpt", str(work / "none.bin"), "--data", str(work), "--out", str(work / "i0")]) == EXIT_IO
    assert main(["pointcloud", "--disp", str(work / "none.pfm"), "--out", str(work / "p0")]) == EXIT_IO
