import json

import numpy as np
import pytest

from oracles import bilinear
from stereoroma.datagen import (BACKGROUND, DIFFUSE, LEFT, RIGHT, TRANSPARENT, MissingFileError, SceneConfig,
                                SceneSample, SchemaMismatchError, apply_speckle, corrupt_raw, default_sgm,
                                generate_scene, make_sample, material_stats, read_dataset, read_sample, render,
                                write_dataset)
from stereoroma.frames import StereoFrame
from stereoroma.metrics import epe


def warp_residual(sample):
    """Mean |I_l(u) - I_r(u + gt)| over visible diffuse/background pixels, by explicit loops."""
    L, R = sample.frame.left, sample.frame.right
    m = ~sample.occlusion & np.isin(sample.material, [DIFFUSE, BACKGROUND])
    errs = [abs(L[v, u] - bilinear(R, u + sample.gt.values[v, u], v)) for v, u in zip(*np.nonzero(m))]
    return float(np.mean(errs))


@pytest.mark.parametrize("seed", range(3))
def test_photometric_consistency(seed):
    assert warp_residual(generate_scene(SceneConfig(speckle_density=0), np.random.default_rng(seed))) < 0.02
    assert warp_residual(make_sample(SceneConfig(), seed)) < 0.02


def test_empty_scene_is_easy_for_sgm():
    cfg = SceneConfig(n_objects=0)
    for seed in range(3):
        s = make_sample(cfg, seed)
        assert (s.material == BACKGROUND).all()
        assert epe(s.frame.raw, s.gt) < 0.5


def test_occlusion_is_a_z_buffer_result():
    cfg = SceneConfig(n_objects=4)
    checked = explained = 0
    for seed in range(4):
        s = generate_scene(cfg, np.random.default_rng(seed))
        d = s.gt.values
        h, w = d.shape
        x = np.arange(w)[None, :] + d
        border = x > w - 1
        assert s.occlusion[border].all()
        for v, u in zip(*np.nonzero(s.occlusion & ~border)):
            checked += 1
            # some nearer left pixel lands on (about) the same right-view location
            hits = np.abs(x[v] - x[v, u]) < 1.0
            explained += bool(np.any(hits & (d[v] > d[v, u] + 0.5)))
    assert checked > 50 and explained / checked > 0.95


def test_speckle_zero_density_is_noop():
    cfg = SceneConfig(speckle_density=0)
    s = generate_scene(cfg, np.random.default_rng(0))
    assert apply_speckle(s, cfg, np.random.default_rng(1)) is s


def textureless(cfg, seed):
    s = generate_scene(cfg, np.random.default_rng(seed))
    for layer in s.scene.layers:
        layer.texture.contrast = 0.0
    f = s.frame
    return SceneSample(StereoFrame(render(s.scene, LEFT, False), render(s.scene, RIGHT, False), cam=f.cam),
                       s.gt, s.material, s.occlusion, s.scene)


def test_speckle_raises_coverage_on_textureless_surfaces():
    cfg = SceneConfig(material_mix=(1.0, 0.0, 0.0))
    for seed in range(3):
        plain = textureless(cfg, seed)
        before = corrupt_raw(plain, np.random.default_rng(0)).frame.raw.valid.mean()
        speck = apply_speckle(plain, cfg, np.random.default_rng(1))
        after = corrupt_raw(speck, np.random.default_rng(0)).frame.raw.valid.mean()
        assert before < after


def test_material_failure_statistics():
    cfg = SceneConfig()
    samples = [make_sample(cfg, 5, i) for i in range(16)]
    tr_n = tr_invalid = 0
    ratios, df_err = [], []
    for s in samples:
        raw, gt = s.frame.raw, s.gt.values
        tr, df = s.material == TRANSPARENT, (s.material == DIFFUSE) & ~s.occlusion
        tr_n += tr.sum()
        tr_invalid += (tr & ~raw.valid).sum()
        df_err.extend(np.abs(raw.values - gt)[df & raw.valid])
        if (tr & raw.valid).any() and (df & raw.valid).any():
            ratios.append(epe(raw, s.gt, tr) / epe(raw, s.gt, df))
    assert tr_n > 0 and len(ratios) >= 4
    assert tr_invalid / tr_n > 0.5
    assert np.mean(ratios) > 3
    assert np.median(df_err) < 1.0


def test_ground_truth_in_range_and_untouched():
    cfg = SceneConfig(dropout_patches=3, specular_bias=2.0)
    for i in range(3):
        s = make_sample(cfg, 0, i)
        ref = generate_scene(cfg, np.random.default_rng([0, i]))
        assert s.gt.values.tobytes() == ref.gt.values.tobytes()
        lo, hi = cfg.disparity_range
        assert s.gt.values.min() >= lo and s.gt.values.max() <= hi and s.gt.valid.all()


def test_generation_is_deterministic():
    a, b = make_sample(SceneConfig(), 3, 2), make_sample(SceneConfig(), 3, 2)
    for x, y in ((a.frame.left, b.frame.left), (a.frame.right, b.frame.right), (a.frame.raw.values, b.frame.raw.values),
                 (a.gt.values, b.gt.values), (a.material, b.material)):
        assert x.tobytes() == y.tobytes()
    c = make_sample(SceneConfig(), 3, 3)
    assert not np.array_equal(a.frame.left, c.frame.left)


@pytest.mark.parametrize("kw", [{"material_mix": (0.5, 0.5, 0.5)}, {"material_mix": (1.0, 0.0)},
                                {"material_mix": (1.5, -0.5, 0.0)}, {"disparity_range": (5.0, 2.0)},
                                {"width": 4}, {"n_objects": -1}, {"speckle_density": -0.1}])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        SceneConfig(**kw)


def test_norm_check():
    SceneConfig().validate_norm(32)
    with pytest.raises(ValueError):
        SceneConfig().validate_norm(16)


def test_dataset_round_trip(tmp_path):
    cfg = SceneConfig(width=32, height=32, disparity_range=(2.0, 12.0))
    samples = [make_sample(cfg, 4, i) for i in range(4)]
    man = write_dataset(tmp_path, samples, cfg, 4, train_fraction=0.75)
    assert man["train"] == ["sample_00000", "sample_00001", "sample_00002"] and man["test"] == ["sample_00003"]
    assert man["material_fraction"] == material_stats(samples)
    back = read_dataset(tmp_path)
    assert len(back) == 4 and len(read_dataset(tmp_path, "test")) == 1
    for a, b in zip(samples, back):
        assert a.frame.left.astype(np.float32).tobytes() == b.frame.left.tobytes()
        assert a.gt.values.astype(np.float32).tobytes() == b.gt.values.astype(np.float32).tobytes()
        np.testing.assert_array_equal(a.frame.raw.values.astype(np.float32), b.frame.raw.values)
        np.testing.assert_array_equal(a.frame.raw.valid, b.frame.raw.valid)
        np.testing.assert_array_equal(a.material, b.material)
        np.testing.assert_array_equal(a.occlusion, b.occlusion)
    meta = json.loads((tmp_path / "sample_00002" / "meta.json").read_text())
    assert meta["seed"] == 4 and meta["index"] == 2 and meta["split"] == "train"
    assert SceneConfig(**meta["scene_config"]) == cfg and meta["sgm"] == default_sgm(cfg).to_dict()


def test_dataset_errors(tmp_path):
    cfg = SceneConfig(width=16, height=16, disparity_range=(2.0, 8.0))
    write_dataset(tmp_path, [make_sample(cfg, 0, 0)], cfg, 0)
    (tmp_path / "sample_00000" / "raw.pfm").unlink()
    with pytest.raises(MissingFileError, match="sample_00000"):
        read_dataset(tmp_path)
    with pytest.raises(MissingFileError):
        read_dataset(tmp_path / "nowhere")
    write_dataset(tmp_path / "b", [make_sample(cfg, 0, 0)], cfg, 0)
    meta = tmp_path / "b" / "sample_00000" / "meta.json"
    m = json.loads(meta.read_text())
    m["schema_version"] = 99
    meta.write_text(json.dumps(m))
    with pytest.raises(SchemaMismatchError):
        read_sample(tmp_path / "b" / "sample_00000")
