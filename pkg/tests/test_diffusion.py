import math

import numpy as np
import pytest

from oracles import shift_scene
from stereoroma.conditioning import ConditioningError, NormSpec
from stereoroma.diffusion import (SamplerConfig, ancestral_step, chain_rng, clip_eps, draw_noise, forward_diffuse,
                                  guided_step, make_schedule, pyramid_noise, sample)
from stereoroma.frames import StereoFrame
from stereoroma.geometry import GuidanceConfig
from stereoroma.imagecore import DisparityMap


@pytest.mark.parametrize("kind", ["linear", "cosine"])
@pytest.mark.parametrize("T", [2, 64, 128, 1000])
def test_schedule_invariants(kind, T):
    s = make_schedule(kind, T)
    b = s.beta[1:]
    assert np.all((b > 0) & (b < 1))
    assert np.all(np.diff(s.alpha_bar) < 0)
    prod = 1.0
    for t in range(1, T + 1):
        prod *= 1.0 - s.beta[t]
        assert abs(s.alpha_bar[t] - prod) <= 1e-12 * prod


def test_linear_endpoints():
    s = make_schedule("linear", 2, 1e-4, 0.02)
    np.testing.assert_array_equal(s.beta[1:], [1e-4, 0.02])


def test_cosine_starts_at_one():
    s = make_schedule("cosine", 128)
    assert s.alpha_bar[0] == 1.0 and s.beta[0] == 0.0
    assert s.beta[1:].min() >= 1e-4 and s.beta.max() <= 0.999


def test_schedule_errors():
    for args in (("linear", 1), ("linear", 8, 0.0, 0.1), ("linear", 8, 0.2, 0.1), ("linear", 8, 0.1, 1.0),
                 ("quadratic", 8)):
        with pytest.raises(ValueError):
            make_schedule(*args)


def test_respaced_schedule():
    s = make_schedule("cosine", 128)
    assert s.respaced(128) is s
    r = s.respaced(16)
    assert r.T == 16 and r.model_t(16) == 128 and r.model_t(1) == 8
    # the last stride has beta near 1, so 1 - beta loses about five digits
    np.testing.assert_allclose(r.alpha_bar[1:], s.alpha_bar[r.timesteps[1:]], rtol=1e-9)
    with pytest.raises(ValueError):
        s.respaced(0)


def test_normalization_examples():
    n = NormSpec(192.0)
    x, clipped = n.normalize(np.array([0.0, 96.0, 192.0, 200.0]))
    np.testing.assert_array_equal(x, [-1.0, 0.0, 1.0, 1.0])
    assert clipped == 1
    np.testing.assert_allclose(n.denormalize(x[:3]), [0.0, 96.0, 192.0])
    assert n.grad_factor == 96.0
    with pytest.raises(ValueError):
        NormSpec(0.0)


def test_forward_diffuse_examples(rng):
    s = make_schedule("cosine", 128)
    x0 = rng.uniform(-1, 1, (4, 4))
    np.testing.assert_array_equal(forward_diffuse(x0, 0, rng.standard_normal((4, 4)), s), x0)
    np.testing.assert_array_equal(forward_diffuse(x0, 50, np.zeros((4, 4)), s), math.sqrt(s.alpha_bar[50]) * x0)
    with pytest.raises(ValueError):
        forward_diffuse(x0, 3, np.zeros((3, 3)), s)


def test_forward_diffuse_moments():
    s = make_schedule("cosine", 128)
    r = np.random.default_rng(7)
    x0, t, n = 0.6, 40, 10_000
    xt = forward_diffuse(np.full(n, x0), t, r.standard_normal(n), s)
    mean, std = math.sqrt(s.alpha_bar[t]) * x0, math.sqrt(1 - s.alpha_bar[t])
    assert abs(xt.mean() - mean) < 3 * std / math.sqrt(n)
    # std of the sample variance for a normal is sigma^2 sqrt(2/(n-1))
    assert abs(xt.var(ddof=1) - std**2) < 3 * std**2 * math.sqrt(2 / (n - 1))


def test_pyramid_noise_statistics():
    r = np.random.default_rng(3)
    one = np.stack([pyramid_noise((8, 8), 1, r) for _ in range(2000)])
    four = np.stack([pyramid_noise((8, 8), 4, r) for _ in range(2000)])
    n = one.shape[0]
    # unit variance per field by construction; per-pixel variance checked over draws
    white = np.stack([r.standard_normal((8, 8)) for _ in range(2000)])
    assert abs(white.var(axis=0).mean() - 1) < 0.05
    assert abs(one.var(axis=0).mean() - 1) < 0.05
    assert abs(four.mean()) < 3 / math.sqrt(four.size / 16)

    def neighbour_corr(a):
        return np.mean(a[:, :, 1:] * a[:, :, :-1]) / np.mean(a * a)

    assert neighbour_corr(four) > neighbour_corr(one) + 0.1
    assert abs(one.mean()) < 3 / math.sqrt(n * 64)
    with pytest.raises(ValueError):
        pyramid_noise((4, 4), 0, r)
    with pytest.raises(ValueError):
        draw_noise((4, 4), "pink", r)


def test_ancestral_step_hand_calculation():
    s = make_schedule("linear", 2, 1e-4, 0.02)
    # t = 1: no noise, x0 = (x1 - b1 / sqrt(1 - ab1) * eps) / sqrt(a1)
    b1 = 1e-4
    x1, eps = 0.3, 0.5
    expect = (x1 - b1 / math.sqrt(b1) * eps) / math.sqrt(1 - b1)
    assert ancestral_step(np.array([x1]), 1, np.array([eps]), s, None)[0] == pytest.approx(expect, rel=1e-15)
    # t = 2 adds sqrt(beta_2) z with z from the rng
    ab2 = (1 - 1e-4) * (1 - 0.02)
    z = np.random.default_rng(5).standard_normal(1)[0]
    expect = (x1 - 0.02 / math.sqrt(1 - ab2) * eps) / math.sqrt(0.98) + math.sqrt(0.02) * z
    got = ancestral_step(np.array([x1]), 2, np.array([eps]), s, np.random.default_rng(5))[0]
    assert got == pytest.approx(expect, rel=1e-15)
    with pytest.raises(ValueError):
        ancestral_step(np.zeros(1), 3, np.zeros(1), s, None)


def test_ancestral_step_deterministic_given_seed(rng):
    s = make_schedule()
    x, e = rng.standard_normal((6, 6)), rng.standard_normal((6, 6))
    a = ancestral_step(x, 60, e, s, np.random.default_rng(1))
    b = ancestral_step(x, 60, e, s, np.random.default_rng(1))
    assert a.tobytes() == b.tobytes()


def test_clip_eps_is_identity_when_x0_in_range(rng):
    s = make_schedule()
    x0 = rng.uniform(-0.9, 0.9, (5, 5))
    eps = rng.standard_normal((5, 5))
    xt = forward_diffuse(x0, 70, eps, s)
    np.testing.assert_allclose(clip_eps(xt, 70, eps, s), eps, atol=1e-9)
    # an estimate implying x0 far outside [-1, 1] is pulled back to the boundary
    fixed = clip_eps(xt, 70, eps - 50, s)
    x0_hat = (xt - np.sqrt(1 - s.alpha_bar[70]) * fixed) / np.sqrt(s.alpha_bar[70])
    np.testing.assert_allclose(x0_hat, 1.0, atol=1e-9)


def _frame(seed=0, k=4, size=32):
    left, right = shift_scene(k, seed, size)
    raw = DisparityMap(np.full((size, size), float(k)), np.ones((size, size), bool))
    return StereoFrame(left, right, raw)


@pytest.mark.parametrize("clip", [False, True])
def test_guidance_off_matches_ancestral_chain(rng, clip):
    sched = make_schedule("cosine", 128)
    frame = _frame()
    cfg = SamplerConfig(steps=128, schedule=sched, guidance=GuidanceConfig(s=0.0), clip_denoised=clip,
                        norm=NormSpec(32))
    x_a = x_b = rng.standard_normal((32, 32))
    ra, rb = np.random.default_rng(9), np.random.default_rng(9)
    for t in range(128, 0, -1):
        eps = np.sin(x_a * 3 + t)  # any deterministic stand-in for the network
        x_a, _ = guided_step(x_a, t, eps, frame, cfg, ra)
        x_b = ancestral_step(x_b, t, clip_eps(x_b, t, eps, sched) if clip else eps, sched, rb)
        assert x_a.tobytes() == x_b.tobytes()


def test_raw_guidance_at_raw_is_unguided(rng):
    sched = make_schedule()
    frame = _frame(k=4)
    norm = NormSpec(32)
    x = norm.normalize(frame.raw.values)[0]
    eps = rng.standard_normal(x.shape)
    g = SamplerConfig(schedule=sched, guidance=GuidanceConfig(mode="raw_sign", alpha=0.5), norm=norm)
    u = SamplerConfig(schedule=sched, guidance=GuidanceConfig(mode="none"), norm=norm)
    a, gn = guided_step(x, 30, eps, frame, g, np.random.default_rng(2))
    b, _ = guided_step(x, 30, eps, frame, u, np.random.default_rng(2))
    assert gn == 0.0 and a.tobytes() == b.tobytes()


def test_stereo_guidance_moves_towards_truth():
    sched = make_schedule()
    norm = NormSpec(32)
    for seed in range(3):
        frame = _frame(seed, k=6)
        start = norm.normalize(np.full((32, 32), 7.0))[0]  # 1 px too far, inside the photometric basin
        t = 40
        g = SamplerConfig(schedule=sched, guidance=GuidanceConfig(s=0.1), norm=norm)
        u = SamplerConfig(schedule=sched, guidance=GuidanceConfig(mode="none"), norm=norm)
        eps = np.zeros_like(start)
        a, gn = guided_step(start, t, eps, frame, g, np.random.default_rng(seed))
        b, _ = guided_step(start, t, eps, frame, u, np.random.default_rng(seed))
        assert gn > 0
        err_g = abs(norm.denormalize(a)[4:-4, 4:-10].mean() - 6)
        err_u = abs(norm.denormalize(b)[4:-4, 4:-10].mean() - 6)
        assert err_g < err_u


def test_stereo_guidance_needs_pair():
    frame = _frame()
    frame.right = None
    cfg = SamplerConfig(guidance=GuidanceConfig(s=1.0), norm=NormSpec(32))
    with pytest.raises(ValueError):
        guided_step(np.zeros((32, 32)), 5, np.zeros((32, 32)), frame, cfg, np.random.default_rng(0))


def test_sampler_config_validation():
    with pytest.raises(ValueError):
        SamplerConfig(steps=200, schedule=make_schedule(T=128))
    with pytest.raises(ValueError):
        SamplerConfig(noise_kind="pink")


class OracleDenoiser:
    """Predicts the exact noise for a known clean field, so sampling must recover it."""

    cond_mode = "left+right+raw"

    def __init__(self, x0, sched):
        self.x0, self.sched = x0, sched

    def predict(self, x, t, cond):
        ab = self.sched.alpha_bar[np.asarray(t)][:, None, None]
        return (x - np.sqrt(ab) * self.x0[None]) / np.sqrt(1 - ab)


class ZeroDenoiser:
    def __init__(self, mode):
        self.cond_mode = mode

    def predict(self, x, t, cond):
        return np.zeros_like(x)


def test_sample_determinism_and_chains():
    frame = _frame()
    cfg = SamplerConfig(steps=8, guidance=GuidanceConfig(s=0.5), seed=3, norm=NormSpec(32))
    den = ZeroDenoiser("left+right+raw")
    a = sample(den, frame, cfg, chains=2)
    b = sample(den, frame, cfg, chains=2)
    assert len(a) == 2
    for x, y in zip(a, b):
        assert x.disparity.values.tobytes() == y.disparity.values.tobytes()
    assert not np.array_equal(a[0].disparity.values, a[1].disparity.values)
    # chain i does not depend on how many chains run alongside it
    solo = sample(den, frame, cfg, chains=1)[0]
    assert solo.disparity.values.tobytes() == a[0].disparity.values.tobytes()
    rec = a[0].report[0]
    assert set(rec) == {"step", "t", "guidance_norm", "mean_disp"} and len(a[0].report) == 8
    assert chain_rng(3, 1).standard_normal() == np.random.default_rng([3, 1]).standard_normal()


def test_sample_recovers_clean_field_and_snapshots_progress():
    sched = make_schedule("cosine", 128)
    norm = NormSpec(32)
    frame = _frame()
    x0 = norm.normalize(np.tile(np.linspace(4, 20, 32), (32, 1)))[0]
    for steps in (128, 16):
        cfg = SamplerConfig(steps=steps, schedule=sched, seed=1, norm=norm)
        res = sample(OracleDenoiser(x0, sched), frame, cfg)[0]
        np.testing.assert_allclose(res.disparity.values, norm.denormalize(x0), atol=1e-6)
        snaps = res.snapshots
        stride = steps // 4
        assert [s[0] for s in snaps] == [stride, 2 * stride, 3 * stride, steps]
        final = res.disparity.values
        dist = [np.abs(s[2] - final).mean() for s in snaps]
        pairs = [b <= a for a, b in zip(dist, dist[1:])]
        assert np.mean(pairs) >= 0.8


def test_sample_checks_conditioning():
    frame = _frame()
    frame.raw = None
    with pytest.raises(ConditioningError):
        sample(ZeroDenoiser("left+right+raw"), frame, SamplerConfig(steps=2, norm=NormSpec(32)))
