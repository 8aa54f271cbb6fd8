"""Conditional noise-prediction network, its training loop and checkpoints.

The network is a small U-shaped conv net: 3x3 convolutions, group norm,
SiLU, an additive time embedding per residual block, skip connections and a
residual bottleneck. Conditioning images are concatenated to x_t at the
input. Activations are NHWC.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .conditioning import NormSpec, canonical_mode, in_channels, make_condition
from .diffusion import NoiseSchedule, draw_noise, make_schedule

log = logging.getLogger(__name__)

MAGIC = b"SRDN"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class SpecMismatchError(CheckpointError):
    pass


class TrainingDivergedError(RuntimeError):
    def __init__(self, msg, last_good):
        super().__init__(msg)
        self.last_good = last_good


@dataclass(frozen=True)
class DenoiserSpec:
    cond_mode: str = "left+right+raw"
    base_width: int = 32
    depth: int = 3
    time_embed_dim: int = 64

    def __post_init__(self):
        object.__setattr__(self, "cond_mode", canonical_mode(self.cond_mode))
        if self.depth < 1 or self.base_width < 1 or self.time_embed_dim < 2:
            raise ValueError("depth, base_width and time_embed_dim must be positive")
        if self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be even")

    @property
    def in_channels(self):
        return in_channels(self.cond_mode)

    def widths(self):
        return [self.base_width * 2**i for i in range(self.depth)]

    def to_dict(self):
        return asdict(self)


def groups_for(c):
    g = min(8, c)
    while c % g:
        g -= 1
    return g


def layout(spec: DenoiserSpec):
    """Ordered (name, shape) table; the flat parameter vector follows it."""
    E = spec.time_embed_dim
    ws = spec.widths()
    out = [("time.w", (E, E)), ("time.b", (E,))]
    out += [("in.w", (3, 3, spec.in_channels, ws[0])), ("in.b", (ws[0],))]

    def res(prefix, cin, cout):
        t = [
            (f"{prefix}.gn1.g", (cin,)), (f"{prefix}.gn1.b", (cin,)),
            (f"{prefix}.conv1.w", (3, 3, cin, cout)), (f"{prefix}.conv1.b", (cout,)),
            (f"{prefix}.temb.w", (E, cout)), (f"{prefix}.temb.b", (cout,)),
            (f"{prefix}.gn2.g", (cout,)), (f"{prefix}.gn2.b", (cout,)),
            (f"{prefix}.conv2.w", (3, 3, cout, cout)), (f"{prefix}.conv2.b", (cout,)),
        ]
        if cin != cout:
            t += [(f"{prefix}.skip.w", (cin, cout)), (f"{prefix}.skip.b", (cout,))]
        return t

    prev = ws[0]
    for i, c in enumerate(ws):
        out += res(f"down{i}", prev, c)
        prev = c
    out += res("mid", prev, prev)
    for i in reversed(range(spec.depth)):
        out += res(f"up{i}", prev + ws[i], ws[i])
        prev = ws[i]
    out += [("out.gn.g", (prev,)), ("out.gn.b", (prev,)), ("out.w", (3, 3, prev, 1)), ("out.b", (1,))]
    return out


def param_count(spec: DenoiserSpec) -> int:
    return sum(math.prod(s) for _, s in layout(spec))


def _views(flat, spec):
    views = {}
    off = 0
    for name, shape in layout(spec):
        n = math.prod(shape)
        views[name] = flat[off : off + n].reshape(shape)
        off += n
    return views


def init_params(spec: DenoiserSpec, seed=0, dtype=np.float32):
    """Fan-in scaled normal weights, unit norm gains, zero biases and a zero output conv."""
    rng = np.random.default_rng(seed)
    flat = np.zeros(param_count(spec), dtype=np.float64)
    for name, v in _views(flat, spec).items():
        if name.startswith("out.w") or name.endswith(".b"):
            continue
        if name.endswith(".g"):
            v[...] = 1.0
            continue
        fan_in = math.prod(v.shape[:-1])
        v[...] = rng.standard_normal(v.shape) / math.sqrt(fan_in)
    return flat.astype(dtype)


def time_embedding(t, dim):
    """Interleaved [sin, cos] of t at frequencies 10000^(-k/(dim/2))."""
    if dim % 2:
        raise ValueError("embedding dim must be even")
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if np.any(t < 0):
        raise ValueError("t must be >= 0")
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = t[:, None] * freqs[None, :]
    out = np.empty((len(t), dim))
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out


def _net(tape, P, spec, x, t):
    """Build the forward graph. ``P`` maps names to parameter nodes."""
    dt = P["in.w"].value.dtype
    emb = ad.Node(time_embedding(t, spec.time_embed_dim).astype(dt))
    emb = ad.silu(tape, ad.dense(tape, emb, P["time.w"], P["time.b"]))

    def res(prefix, h):
        cin = h.value.shape[-1]
        a = ad.silu(tape, ad.group_norm(tape, h, P[f"{prefix}.gn1.g"], P[f"{prefix}.gn1.b"], groups_for(cin)))
        a = ad.conv3x3(tape, a, P[f"{prefix}.conv1.w"], P[f"{prefix}.conv1.b"])
        a = ad.add_channel_bias(tape, a, ad.dense(tape, emb, P[f"{prefix}.temb.w"], P[f"{prefix}.temb.b"]))
        cout = a.value.shape[-1]
        a = ad.silu(tape, ad.group_norm(tape, a, P[f"{prefix}.gn2.g"], P[f"{prefix}.gn2.b"], groups_for(cout)))
        a = ad.conv3x3(tape, a, P[f"{prefix}.conv2.w"], P[f"{prefix}.conv2.b"])
        skip = h if cin == cout else ad.conv1x1(tape, h, P[f"{prefix}.skip.w"], P[f"{prefix}.skip.b"])
        return ad.add(tape, a, skip)

    h = ad.conv3x3(tape, x, P["in.w"], P["in.b"])
    skips = []
    for i in range(spec.depth):
        h = res(f"down{i}", h)
        skips.append(h)
        h = ad.avg_pool2(tape, h)
    h = res("mid", h)
    for i in reversed(range(spec.depth)):
        h = ad.concat(tape, ad.upsample2(tape, h), skips[i])
        h = res(f"up{i}", h)
    h = ad.silu(tape, ad.group_norm(tape, h, P["out.gn.g"], P["out.gn.b"], groups_for(h.value.shape[-1])))
    return ad.conv3x3(tape, h, P["out.w"], P["out.b"])


def _check_inputs(spec, x_t, cond):
    if x_t.ndim != 3:
        raise ValueError("x_t must be (N, H, W)")
    n, h, w = x_t.shape
    if cond.shape[:3] != (n, h, w):
        raise ValueError(f"conditioning {cond.shape} does not match x_t {x_t.shape}")
    if 1 + cond.shape[3] != spec.in_channels:
        raise ValueError(f"{cond.shape[3]} conditioning channels, spec expects {spec.in_channels - 1}")
    m = 2**spec.depth
    if h % m or w % m:
        raise ValueError(f"spatial size {w}x{h} must be divisible by {m}")


def forward(params, spec: DenoiserSpec, x_t, t, cond):
    """eps_hat of shape (N, H, W) for x_t (N, H, W), t (N,), cond (N, H, W, C)."""
    dt = params.dtype
    x_t = np.asarray(x_t, dtype=dt)
    cond = np.asarray(cond, dtype=dt)
    _check_inputs(spec, x_t, cond)
    P = {k: ad.Node(v) for k, v in _views(params, spec).items()}
    x = ad.Node(np.concatenate([x_t[..., None], cond], axis=-1))
    return _net(None, P, spec, x, t).value[..., 0]


@dataclass
class TrainBatch:
    x_t: np.ndarray  # (N, H, W)
    t: np.ndarray  # (N,)
    cond: np.ndarray  # (N, H, W, C)
    eps: np.ndarray  # (N, H, W)


def backward(params, spec: DenoiserSpec, batch: TrainBatch, loss_kind="mse"):
    """Batch-mean loss between eps and eps_hat and its gradient (flat, params layout)."""
    dt = params.dtype
    x_t = np.asarray(batch.x_t, dtype=dt)
    cond = np.asarray(batch.cond, dtype=dt)
    if len(x_t) == 0:
        raise ValueError("empty batch")
    _check_inputs(spec, x_t, cond)
    grad = np.zeros_like(params)
    gviews = _views(grad, spec)
    P = {}
    for k, v in _views(params, spec).items():
        P[k] = ad.Node(v, gviews[k])
    tape = ad.Tape()
    x = ad.Node(np.concatenate([x_t[..., None], cond], axis=-1))
    out = _net(tape, P, spec, x, batch.t)
    r = out.value[..., 0] - np.asarray(batch.eps, dtype=dt)
    if loss_kind == "mse":
        loss = float(np.mean(r.astype(np.float64) ** 2))
        dout = (2.0 / r.size) * r
    elif loss_kind == "l1":
        loss = float(np.mean(np.abs(r.astype(np.float64))))
        dout = np.sign(r) / r.size
    else:
        raise ValueError(f"unknown loss {loss_kind!r}")
    if not math.isfinite(loss):
        raise FloatingPointError("non-finite loss")
    tape.backward(out, dout[..., None].astype(dt))
    return loss, grad


# ------------------------------------------------------------- training

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    learning_rate: float = 1e-4
    loss: str = "mse"
    crop: tuple = (64, 64)  # (w, h)
    seed: int = 0
    noise_kind: str = "pyramid"
    rms_decay: float = 0.999
    rms_eps: float = 1e-8

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size >= 1 and epochs >= 0 required")
        if self.loss not in ("mse", "l1"):
            raise ValueError("loss must be 'mse' or 'l1'")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        object.__setattr__(self, "crop", tuple(int(c) for c in self.crop))

    def to_dict(self):
        return asdict(self)


@dataclass
class OptState:
    """Per-parameter running mean of squared gradients (no momentum)."""

    sq: np.ndarray
    step: int = 0

    def update(self, params, grad, cfg: TrainConfig):
        self.step += 1
        self.sq *= cfg.rms_decay
        self.sq += (1.0 - cfg.rms_decay) * grad * grad
        corr = 1.0 - cfg.rms_decay**self.step
        params -= (cfg.learning_rate * grad / (np.sqrt(self.sq / corr) + cfg.rms_eps)).astype(params.dtype)


@dataclass
class TrainSample:
    x0: np.ndarray  # (H, W) normalized disparity
    cond: np.ndarray  # (H, W, C)


def prepare_dataset(samples, spec: DenoiserSpec, norm: NormSpec):
    """Turn SceneSamples (or anything with .frame and .gt) into TrainSamples."""
    out = []
    for s in samples:
        x0, _ = norm.normalize(s.gt.values)
        out.append(TrainSample(x0.astype(np.float32), make_condition(s.frame, spec.cond_mode, norm)))
    return out


@dataclass
class TrainResult:
    params: np.ndarray
    losses: list = field(default_factory=list)  # per-epoch mean loss
    opt: OptState | None = None
    epoch: int = 0


def _epoch_batches(data, cfg: TrainConfig, sched: NoiseSchedule, epoch):
    rng = np.random.default_rng([cfg.seed, epoch])
    order = rng.permutation(len(data))
    cw, chh = cfg.crop
    for start in range(0, len(order), cfg.batch_size):
        idx = order[start : start + cfg.batch_size]
        xs, cs, ts, es = [], [], [], []
        for i in idx:
            s = data[i]
            h, w = s.x0.shape
            if cw > w or chh > h:
                raise ValueError(f"crop {cw}x{chh} larger than sample {w}x{h}")
            oy = int(rng.integers(0, h - chh + 1))
            ox = int(rng.integers(0, w - cw + 1))
            x0 = s.x0[oy : oy + chh, ox : ox + cw].astype(np.float64)
            t = int(rng.integers(1, sched.T + 1))
            eps = draw_noise((chh, cw), cfg.noise_kind, rng)
            ab = sched.alpha_bar[t]
            xs.append(np.sqrt(ab) * x0 + np.sqrt(1 - ab) * eps)
            cs.append(s.cond[oy : oy + chh, ox : ox + cw])
            ts.append(t)
            es.append(eps)
        yield TrainBatch(np.stack(xs), np.array(ts), np.stack(cs), np.stack(es))


def train(data, spec: DenoiserSpec, cfg: TrainConfig, sched: NoiseSchedule | None = None,
          resume: TrainResult | None = None, on_epoch=None) -> TrainResult:
    """Train for ``cfg.epochs`` epochs (continuing ``resume`` if given).

    Epoch e draws all randomness from ``default_rng([seed, e])`` so a resumed
    run follows the uninterrupted trajectory exactly.
    """
    if not data:
        raise ValueError("empty dataset")
    if data[0].cond.shape[-1] + 1 != spec.in_channels:
        raise ValueError("dataset conditioning does not match the spec")
    sched = sched or make_schedule()
    if resume is None:
        params = init_params(spec, cfg.seed)
        res = TrainResult(params, [], OptState(np.zeros(params.shape, dtype=np.float64)), 0)
    else:
        res = TrainResult(resume.params.copy(), list(resume.losses),
                          OptState(resume.opt.sq.copy(), resume.opt.step), resume.epoch)
    while res.epoch < cfg.epochs:
        good = res.params.copy()
        total, count = 0.0, 0
        for batch in _epoch_batches(data, cfg, sched, res.epoch):
            try:
                loss, grad = backward(res.params, spec, batch, cfg.loss)
            except FloatingPointError:
                raise TrainingDivergedError(f"non-finite loss in epoch {res.epoch}", good) from None
            res.opt.update(res.params, grad, cfg)
            if not np.all(np.isfinite(res.params)):
                raise TrainingDivergedError(f"non-finite parameters in epoch {res.epoch}", good)
            total += loss * len(batch.t)
            count += len(batch.t)
        res.losses.append(total / count)
        res.epoch += 1
        log.info("epoch %d loss %.5f", res.epoch, res.losses[-1])
        if on_epoch is not None:
            on_epoch(res)
    return res


class Denoiser:
    """Trained network bound to its spec; the object ``diffusion.sample`` expects."""

    def __init__(self, spec: DenoiserSpec, params, schedule=None, norm=None):
        self.spec = spec
        self.params = params
        self.schedule = schedule or make_schedule()
        self.norm = norm or NormSpec()

    @property
    def cond_mode(self):
        return self.spec.cond_mode

    def predict(self, x, t, cond):
        return forward(self.params, self.spec, x, t, cond)


# ----------------------------------------------------------- checkpoints

def save_params(path, params, spec: DenoiserSpec, schedule: NoiseSchedule, norm: NormSpec,
                opt: OptState | None = None, epoch=0, losses=(), extra=None) -> None:
    """magic | u32 version | u32 header length | JSON header | f32 params [| f32 opt state]."""
    header = {
        "spec": spec.to_dict(),
        "schedule": schedule.fingerprint(),
        "d_norm": norm.d_norm,
        "n_params": int(params.size),
        "epoch": int(epoch),
        "losses": [float(l) for l in losses],
        "optimizer": {"kind": "rms", "step": opt.step if opt else 0, "has_state": opt is not None},
        "init": "fan-in normal, zero output conv",
    }
    if extra:
        header["extra"] = extra
    hb = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(hb)))
        f.write(hb)
        f.write(np.asarray(params, dtype="<f4").tobytes())
        if opt is not None:
            f.write(np.asarray(opt.sq, dtype="<f8").tobytes())


@dataclass
class Checkpoint:
    spec: DenoiserSpec
    params: np.ndarray
    header: dict
    opt: OptState | None

    @property
    def norm(self):
        return NormSpec(self.header["d_norm"])

    def schedule(self):
        s = self.header["schedule"]
        return make_schedule(s["kind"], s["T"], s["beta_start"], s["beta_end"])

    def denoiser(self):
        return Denoiser(self.spec, self.params, self.schedule(), self.norm)

    def train_result(self):
        return TrainResult(self.params.copy(), list(self.header["losses"]), self.opt, self.header["epoch"])


def load_params(path, expect_spec: DenoiserSpec | None = None) -> Checkpoint:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise BadMagicError(f"{path}: not a denoiser checkpoint")
    if len(buf) < 12:
        raise CheckpointError("truncated checkpoint")
    version, hlen = struct.unpack("<II", buf[4:12])
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, expected {FORMAT_VERSION}")
    try:
        header = json.loads(buf[12 : 12 + hlen])
        spec = DenoiserSpec(**header["spec"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"bad checkpoint header: {exc}") from None
    if expect_spec is not None and spec != expect_spec:
        raise SpecMismatchError(f"checkpoint spec {spec} does not match {expect_spec}")
    n = header["n_params"]
    if n != param_count(spec):
        raise SpecMismatchError("parameter count does not match the spec")
    off = 12 + hlen
    if len(buf) < off + 4 * n:
        raise CheckpointError("truncated parameter payload")
    params = np.frombuffer(buf[off : off + 4 * n], dtype="<f4").astype(np.float32)
    opt = None
    if header["optimizer"]["has_state"]:
        o = off + 4 * n
        if len(buf) != o + 8 * n:
            raise CheckpointError("optimizer state size mismatch")
        opt = OptState(np.frombuffer(buf[o:], dtype="<f8").copy(), header["optimizer"]["step"])
    return Checkpoint(spec, params, header, opt)
