"""Noise schedules, forward diffusion and the (guided) ancestral sampler."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .conditioning import NormSpec, make_condition
from .frames import StereoFrame
from .geometry import GuidanceConfig, grad_stereo_matching_loss, raw_sign_guidance
from .imagecore import DisparityMap, upsample_bilinear


@dataclass(frozen=True)
class NoiseSchedule:
    """Arrays are indexed by timestep 0..T with alpha_bar[0] = 1, beta[0] = 0."""

    kind: str
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    timesteps: np.ndarray = field(default=None)  # model timestep for each index
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def respaced(self, steps: int) -> "NoiseSchedule":
        """Uniformly strided sub-schedule with betas recomputed from alpha_bar."""
        if not 1 <= steps <= self.T:
            raise ValueError(f"steps must be in [1, {self.T}]")
        if steps == self.T:
            return self
        ts = np.round(np.arange(steps + 1) * self.T / steps).astype(np.int64)
        ab = self.alpha_bar[ts]
        beta = np.zeros(steps + 1)
        beta[1:] = 1.0 - ab[1:] / ab[:-1]
        alpha = 1.0 - beta
        return NoiseSchedule(self.kind, steps, beta, alpha, np.cumprod(alpha), ts, self.beta_start, self.beta_end)

    def model_t(self, i: int) -> int:
        return int(self.timesteps[i]) if self.timesteps is not None else int(i)

    def fingerprint(self):
        return {"kind": self.kind, "T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end}


def make_schedule(kind="cosine", T=128, beta_start=1e-4, beta_end=0.02) -> NoiseSchedule:
    if T < 2:
        raise ValueError("T must be >= 2")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    beta = np.zeros(T + 1)
    if kind == "linear":
        beta[1:] = np.linspace(beta_start, beta_end, T)
    elif kind == "cosine":
        t = np.arange(T + 1) / T
        f = np.cos((t + 0.008) / 1.008 * np.pi / 2) ** 2
        ab = f / f[0]
        beta[1:] = np.clip(1.0 - ab[1:] / ab[:-1], beta_start, 0.999)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    alpha = 1.0 - beta
    return NoiseSchedule(kind, T, beta, alpha, np.cumprod(alpha), None, float(beta_start), float(beta_end))


def forward_diffuse(x0, t, eps, sched: NoiseSchedule):
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError("x0 and eps shapes differ")
    ab = sched.alpha_bar[t]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def pyramid_noise(shape, levels, rng, decay=0.5):
    """Sum of white fields drawn at shape/2^i, upsampled and weighted decay^i,
    rescaled by the measured std to unit variance."""
    if levels < 1:
        raise ValueError("levels must be >= 1")
    h, w = shape
    out = rng.standard_normal((h, w))
    for i in range(1, levels):
        hi, wi = max(h >> i, 1), max(w >> i, 1)
        out = out + decay**i * upsample_bilinear(rng.standard_normal((hi, wi)), (h, w))
    return out / out.std()


def draw_noise(shape, kind, rng, levels=4):
    if kind == "white":
        return rng.standard_normal(shape)
    if kind == "pyramid":
        return pyramid_noise(shape, levels, rng)
    raise ValueError(f"unknown noise kind {kind!r}")


def chain_rng(seed: int, chain: int = 0):
    """RNG for one sampling chain: ``default_rng([seed, chain])``."""
    return np.random.default_rng([int(seed), int(chain)])


def ancestral_step(x_t, t, eps_hat, sched: NoiseSchedule, rng):
    """x_{t-1} = (x_t - beta_t / sqrt(1 - abar_t) * eps) / sqrt(alpha_t) + sqrt(beta_t) z."""
    if not 1 <= t <= sched.T:
        raise ValueError(f"t={t} outside [1, {sched.T}]")
    beta = sched.beta[t]
    mean = (x_t - beta / np.sqrt(1.0 - sched.alpha_bar[t]) * eps_hat) / np.sqrt(sched.alpha[t])
    if t > 1:
        return mean + np.sqrt(beta) * rng.standard_normal(np.shape(x_t))
    return mean


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 16
    schedule: NoiseSchedule = None
    guidance: GuidanceConfig = field(default_factory=lambda: GuidanceConfig(mode="none"))
    seed: int = 0
    noise_kind: str = "pyramid"
    norm: NormSpec = field(default_factory=NormSpec)
    clip_denoised: bool = True

    def __post_init__(self):
        if self.schedule is None:
            object.__setattr__(self, "schedule", make_schedule())
        if not 1 <= self.steps <= self.schedule.T:
            raise ValueError("steps must be in [1, schedule.T]")
        if self.noise_kind not in ("white", "pyramid"):
            raise ValueError("noise_kind must be 'white' or 'pyramid'")


def clip_eps(x_t, t, eps_hat, sched: NoiseSchedule):
    """Noise estimate consistent with the implied x0 clipped to [-1, 1].

    Plugging it into ``ancestral_step`` gives the posterior mean at the
    clipped x0, which keeps the nearly-singular first steps of the cosine
    schedule from amplifying prediction error.
    """
    ab = sched.alpha_bar[t]
    x0 = np.clip((x_t - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab), -1.0, 1.0)
    return (x_t - np.sqrt(ab) * x0) / np.sqrt(1.0 - ab)


def guidance_gradient(x_t, frame: StereoFrame, guidance: GuidanceConfig, norm: NormSpec):
    """Score perturbation in normalized units (added to the score)."""
    disp = norm.denormalize(x_t)
    if guidance.mode == "stereo_photometric":
        if frame.left is None or frame.right is None:
            raise ValueError("stereo guidance needs a left/right pair")
        # gradient of the pixel-summed loss, so s acts per pixel like alpha below
        g = grad_stereo_matching_loss(frame.left, frame.right, disp, guidance) * disp.size
        # descend the loss; chain rule through x -> pixels
        return -guidance.s * norm.grad_factor * g
    if guidance.mode == "raw_sign":
        if frame.raw is None:
            raise ValueError("raw guidance needs a raw disparity map")
        return raw_sign_guidance(disp, frame.raw, guidance.alpha)
    return np.zeros_like(x_t)


def guided_step(x_t, t, eps_hat, frame: StereoFrame, cfg: SamplerConfig, rng, sched=None):
    """One reverse step on the score -eps/sqrt(1-abar) plus the guidance term.

    The perturbed score is folded back into a noise estimate, optionally
    clipped (``clip_eps``), and passed to ``ancestral_step``.
    Returns (x_{t-1}, guidance_norm).
    """
    sched = sched or cfg.schedule
    g = cfg.guidance
    gnorm = 0.0
    if g.mode == "none" or (g.mode == "stereo_photometric" and g.s == 0):
        eps = eps_hat
    else:
        delta = guidance_gradient(x_t, frame, g, cfg.norm)
        eps = eps_hat - np.sqrt(1.0 - sched.alpha_bar[t]) * delta
        gnorm = float(np.linalg.norm(delta))
    if cfg.clip_denoised:
        eps = clip_eps(x_t, t, eps, sched)
    return ancestral_step(x_t, t, eps, sched, rng), gnorm


@dataclass
class SampleResult:
    disparity: DisparityMap
    snapshots: list  # (step index, model t, disparity array)
    report: list  # JSON-able per-step records


def sample(denoiser, frame: StereoFrame, cfg: SamplerConfig, chains=1, snapshot_every=None):
    """Run ``chains`` independent reverse chains; chain i uses ``chain_rng(seed, i)``.

    ``denoiser`` must expose ``cond_mode`` and ``predict(x, t, cond)`` over
    batches. Returns one ``SampleResult`` per chain.
    """
    sched = cfg.schedule.respaced(cfg.steps)
    cond1 = make_condition(frame, denoiser.cond_mode, cfg.norm)
    h, w = frame.shape
    cond = np.repeat(cond1[None], chains, axis=0)
    rngs = [chain_rng(cfg.seed, c) for c in range(chains)]
    x = np.stack([draw_noise((h, w), cfg.noise_kind, r) for r in rngs])
    if snapshot_every is None:
        # four snapshots per trajectory (every 32 model timesteps when T = 128)
        snapshot_every = max(1, int(round(cfg.steps / 4)))
    snaps = [[] for _ in range(chains)]
    reports = [[] for _ in range(chains)]
    for i in range(sched.T, 0, -1):
        t_model = sched.model_t(i)
        eps = denoiser.predict(x, np.full(chains, t_model), cond).astype(np.float64)
        for c in range(chains):
            x[c], gnorm = guided_step(x[c], i, eps[c], frame, cfg, rngs[c], sched)
            mean_disp = float(cfg.norm.denormalize(x[c]).mean())
            rec = {"step": sched.T - i + 1, "t": t_model, "guidance_norm": gnorm, "mean_disp": mean_disp}
            reports[c].append(rec)
            if (sched.T - i + 1) % snapshot_every == 0 or i == 1:
                snaps[c].append((sched.T - i + 1, t_model, cfg.norm.denormalize(np.clip(x[c], -1, 1))))
    out = []
    for c in range(chains):
        disp = cfg.norm.denormalize(np.clip(x[c], -1.0, 1.0))
        out.append(SampleResult(DisparityMap(disp, np.ones(disp.shape, bool)), snaps[c], reports[c]))
    return out
