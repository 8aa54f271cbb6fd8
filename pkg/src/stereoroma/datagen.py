"""Procedural layered stereo scenes with ground-truth disparity, a projected
dot pattern and material-dependent raw-disparity failures.

Every surface is a plane in disparity space, parametrised by its left-image
coordinates, and both views are rendered from that geometry (the right view
is never a warp of the left). A surface point at left pixel (u, v) with
disparity d appears at (u + d, v) in the right view.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .frames import CameraIntrinsics, StereoFrame
from .imagecore import DisparityMap, load_image, save_pfm, save_pgm
from .sgm import SgmParams, compute_raw_disparity

BACKGROUND, DIFFUSE, SPECULAR, TRANSPARENT = 0, 1, 2, 3
MATERIALS = ("diffuse", "specular", "transparent")
SCHEMA_VERSION = 1
SEE_THROUGH = 0.15  # dot contrast kept on glass
REFLECTANCE = 0.6  # weight of the view-dependent reflection on glass


class DatasetError(IOError):
    pass


class MissingFileError(DatasetError):
    pass


class SchemaMismatchError(DatasetError):
    pass


@dataclass(frozen=True)
class SceneConfig:
    width: int = 64
    height: int = 64
    n_objects: int = 3
    disparity_range: tuple = (2.0, 20.0)
    material_mix: tuple = (0.4, 0.2, 0.4)  # diffuse, specular, transparent
    speckle_density: float = 0.08  # dots per px^2
    noise_sigma: float = 0.005
    object_size: tuple = (10.0, 26.0)  # half-extent range in px
    transparent_alpha: float = 0.25
    refraction_px: float = 5.0
    specular_jitter: float = 3.0
    dropout_patches: int = 0
    specular_bias: float = 0.0
    focal_px: float = 80.0
    baseline_m: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "disparity_range", tuple(float(v) for v in self.disparity_range))
        object.__setattr__(self, "material_mix", tuple(float(v) for v in self.material_mix))
        object.__setattr__(self, "object_size", tuple(float(v) for v in self.object_size))
        d_min, d_max = self.disparity_range
        if not 0 <= d_min < d_max:
            raise ValueError("need 0 <= d_min < d_max")
        if len(self.material_mix) != 3 or min(self.material_mix) < 0:
            raise ValueError("material_mix needs three non-negative probabilities")
        if abs(sum(self.material_mix) - 1.0) > 1e-9:
            raise ValueError(f"material_mix sums to {sum(self.material_mix)}, not 1")
        if self.width < 8 or self.height < 8 or self.n_objects < 0:
            raise ValueError("scene too small or negative object count")
        if self.speckle_density < 0 or self.noise_sigma < 0:
            raise ValueError("densities and noise must be non-negative")

    def validate_norm(self, d_norm):
        if self.disparity_range[1] > d_norm:
            raise ValueError(f"disparity_range exceeds d_norm={d_norm}")

    def camera(self):
        return CameraIntrinsics(self.focal_px, self.focal_px, (self.width - 1) / 2.0,
                                (self.height - 1) / 2.0, self.baseline_m)

    def to_dict(self):
        return asdict(self)


# ------------------------------------------------------------- surfaces

class ValueNoise:
    """Smooth random texture: smoothstep-interpolated lattice noise, two octaves."""

    def __init__(self, rng, extent, spacing=8.0, mean=0.5, contrast=0.3):
        self.spacing = spacing
        self.mean = mean
        self.contrast = contrast
        (u0, u1), (v0, v1) = extent
        self.origin = (u0 - 2 * spacing, v0 - 2 * spacing)
        self.grids = []
        for s, amp in ((spacing, 1.0), (spacing / 2.0, 0.45)):
            nu = int(math.ceil((u1 - u0) / s)) + 6
            nv = int(math.ceil((v1 - v0) / s)) + 6
            self.grids.append((s, amp, rng.uniform(-1, 1, size=(nv, nu))))

    def __call__(self, u, v):
        out = np.zeros(np.broadcast(u, v).shape)
        for s, amp, g in self.grids:
            gu = (u - self.origin[0]) / s
            gv = (v - self.origin[1]) / s
            iu = np.clip(np.floor(gu).astype(int), 0, g.shape[1] - 2)
            iv = np.clip(np.floor(gv).astype(int), 0, g.shape[0] - 2)
            fu = np.clip(gu - iu, 0, 1)
            fv = np.clip(gv - iv, 0, 1)
            wu = fu * fu * (3 - 2 * fu)
            wv = fv * fv * (3 - 2 * fv)
            top = (1 - wu) * g[iv, iu] + wu * g[iv, iu + 1]
            bot = (1 - wu) * g[iv + 1, iu] + wu * g[iv + 1, iu + 1]
            out += amp * ((1 - wv) * top + wv * bot)
        return self.mean + self.contrast * out / 1.45


@dataclass
class Layer:
    material: int
    d0: float
    gu: float
    gv: float
    cx: float
    cy: float
    shape: str  # "plane", "rect", "ellipse"
    half: tuple
    texture: ValueNoise
    refract: tuple = (None, None)  # per-view offset textures for transparent layers
    reflect: tuple = (None, None)  # per-view environment reflection on glass

    def disparity(self, u, v):
        return self.d0 + self.gu * (u - self.cx) + self.gv * (v - self.cy)

    def inside(self, u, v):
        if self.shape == "plane":
            return np.ones(np.broadcast(u, v).shape, bool)
        du = (u - self.cx) / self.half[0]
        dv = (v - self.cy) / self.half[1]
        if self.shape == "rect":
            return (np.abs(du) <= 1) & (np.abs(dv) <= 1)
        return du * du + dv * dv <= 1

    def left_coord(self, x, v):
        """Left-image u of the surface point seen at right-image column x."""
        return (x - self.d0 + self.gu * self.cx - self.gv * (v - self.cy)) / (1.0 + self.gu)


@dataclass
class Dots:
    u: np.ndarray
    v: np.ndarray
    sigma: float = 0.9
    gain: float = 0.45
    jitter: tuple = (None, None)  # per-view (du, dv) for specular blobs

    def field(self, u, v, view=None, sigma=None, amp=None):
        sigma = sigma or self.sigma
        amp = self.gain if amp is None else amp
        du = dv = 0.0
        if view is not None and self.jitter[view] is not None:
            du, dv = self.jitter[view]
        out = np.zeros(u.shape)
        r = 3.0 * sigma
        cu = self.u + du
        cv = self.v + dv
        for i in range(len(cu)):
            near = (np.abs(u - cu[i]) < r) & (np.abs(v - cv[i]) < r)
            if not near.any():
                continue
            out[near] += np.exp(-((u[near] - cu[i]) ** 2 + (v[near] - cv[i]) ** 2) / (2 * sigma**2))
        return amp * out


@dataclass
class Scene:
    cfg: SceneConfig
    layers: list
    noise: tuple  # per-view additive noise fields
    dots: Dots | None = None


LEFT, RIGHT = 0, 1


def _top_layer(layers, u, v, view, exclude=()):
    """Index and disparity of the nearest layer at image position (u, v) in ``view``."""
    best = np.full(u.shape, -1)
    best_d = np.full(u.shape, -np.inf)
    su = np.zeros(u.shape)
    for i, L in enumerate(layers):
        if i in exclude:
            continue
        lu = u if view == LEFT else L.left_coord(u, v)
        inside = L.inside(lu, v)
        d = L.disparity(lu, v)
        take = inside & (d > best_d)
        best[take] = i
        best_d[take] = d[take]
        su[take] = lu[take]
    return best, best_d, su


def _shade(scene: Scene, u, v, view, exclude=(), with_dots=True, depth=0):
    layers = scene.layers
    idx, _, su = _top_layer(layers, u, v, view, exclude)
    out = np.zeros(u.shape)
    dots = scene.dots if with_dots else None
    # the projector sits at the left camera; glass does not block it
    glass = tuple(i for i, L in enumerate(layers) if L.material == TRANSPARENT)
    for i, L in enumerate(layers):
        m = idx == i
        if not m.any():
            continue
        uu, vv = su[m], v[m]
        base = L.texture(uu, vv)
        if L.material == TRANSPARENT and depth < 3:
            off = L.refract[view](uu, vv)
            seen = u[m] + off
            # projector light reaching the background through glass is scattered away
            behind = _shade(scene, seen, v[m], view, exclude + (i,), False, depth + 1)
            val = scene.cfg.transparent_alpha
            front = base
            if dots is not None:
                front = front + SEE_THROUGH * dots.field(uu, vv)
            refl = L.reflect[view](uu, vv)
            out[m] = val * front + (1.0 - val - REFLECTANCE) * behind + REFLECTANCE * refl
            continue
        if dots is not None:
            lit_idx, _, _ = _top_layer(layers, uu, vv, LEFT, glass)
            lit = lit_idx == i
            if L.material == SPECULAR:
                add = dots.field(uu, vv, view=view, sigma=1.4, amp=0.9)
            else:
                add = dots.field(uu, vv)
            base = base + np.where(lit, add, 0.0)
        out[m] = base
    return out


def render(scene: Scene, view, with_dots=True):
    h, w = scene.cfg.height, scene.cfg.width
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    img = _shade(scene, u, v, view, (), with_dots) + scene.noise[view]
    return np.clip(img, 0.0, 1.0).astype(np.float32)


# ------------------------------------------------------------- samples

@dataclass
class SceneSample:
    frame: StereoFrame
    gt: DisparityMap
    material: np.ndarray  # uint8 labels
    occlusion: np.ndarray  # bool, visible in left only
    scene: Scene | None = None
    meta: dict = field(default_factory=dict)


def _sample_material(cfg, rng):
    return (DIFFUSE, SPECULAR, TRANSPARENT)[int(rng.choice(3, p=np.asarray(cfg.material_mix)))]


def generate_scene(cfg: SceneConfig, rng) -> SceneSample:
    """Render a passive (dot-free) layered scene with gt disparity and occlusion."""
    w, h = cfg.width, cfg.height
    d_min, d_max = cfg.disparity_range
    extent = ((-d_max - 4, w + d_max + 4), (-4, h + 4))
    span = d_max - d_min
    # background occupies the far part of the range, objects the near part
    bg_d = rng.uniform(d_min, d_min + 0.25 * span)
    bg_slope = rng.uniform(-0.02, 0.02, size=2) * (cfg.n_objects > 0)
    layers = [Layer(BACKGROUND, bg_d, bg_slope[0], bg_slope[1], (w - 1) / 2, (h - 1) / 2, "plane",
                    (0, 0), ValueNoise(rng, extent, rng.uniform(5, 9), 0.45, 0.35))]
    for _ in range(cfg.n_objects):
        mat = _sample_material(cfg, rng)
        d0 = rng.uniform(d_min + 0.4 * span, d_max - 0.1 * span)
        slanted = rng.random() < 0.4
        gu, gv = (rng.uniform(-0.04, 0.04, size=2) if slanted else (0.0, 0.0))
        hw = rng.uniform(*cfg.object_size, size=2)
        cx = rng.uniform(0.1 * w, 0.9 * w)
        cy = rng.uniform(0.1 * h, 0.9 * h)
        shape = "rect" if rng.random() < 0.5 else "ellipse"
        if mat == TRANSPARENT:
            tex = ValueNoise(rng, extent, rng.uniform(4, 7), 0.55, 0.4)
            refr = tuple(ValueNoise(rng, extent, rng.uniform(2.5, 4), 0.0, cfg.refraction_px)
                         for _ in range(2))
            refl = tuple(ValueNoise(rng, extent, rng.uniform(1.5, 2.5), 0.5, 0.8) for _ in range(2))
        elif mat == SPECULAR:
            tex = ValueNoise(rng, extent, rng.uniform(8, 12), 0.35, 0.08)
            refr = refl = (None, None)
        else:
            tex = ValueNoise(rng, extent, rng.uniform(4, 8), rng.uniform(0.35, 0.65), 0.35)
            refr = refl = (None, None)
        layers.append(Layer(mat, d0, gu, gv, cx, cy, shape, (hw[0], hw[1]), tex, refr, refl))
    noise = tuple(rng.normal(0.0, cfg.noise_sigma, size=(h, w)) if cfg.noise_sigma > 0 else np.zeros((h, w))
                  for _ in range(2))
    scene = Scene(cfg, layers, noise)

    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    idx, gt, _ = _top_layer(layers, u, v, LEFT)
    gt = np.clip(gt, d_min, d_max).astype(np.float32).astype(np.float64)
    material = np.array([L.material for L in layers], dtype=np.uint8)[idx]
    x = u + gt
    ridx, _, _ = _top_layer(layers, x, v, RIGHT)
    occlusion = (x > w - 1) | (ridx != idx)
    frame = StereoFrame(render(scene, LEFT, False), render(scene, RIGHT, False), cam=cfg.camera())
    frame.color = _color(scene, frame.left, idx)
    return SceneSample(frame, DisparityMap(gt, np.ones((h, w), bool)), material, occlusion, scene)


def _color(scene, gray, idx):
    tint = np.array([[0.9, 1.0, 1.1], [1.1, 0.95, 0.85], [1.0, 1.0, 1.0], [0.85, 1.0, 1.1]])
    mats = np.array([L.material for L in scene.layers])[idx]
    return np.clip(gray[:, :, None] * tint[mats], 0, 1).astype(np.float32)


def apply_speckle(sample: SceneSample, cfg: SceneConfig, rng) -> SceneSample:
    """Project a pseudo-random dot field into both views (no-op at density 0)."""
    if cfg.speckle_density <= 0:
        return sample
    scene = sample.scene
    w, h = cfg.width, cfg.height
    d_max = cfg.disparity_range[1]
    area_u = (-d_max - 4.0, w + 4.0)
    n = int(rng.poisson(cfg.speckle_density * (area_u[1] - area_u[0]) * (h + 4)))
    du = rng.uniform(*area_u, size=n)
    dv = rng.uniform(-2.0, h + 2.0, size=n)
    jit = tuple(rng.uniform(-cfg.specular_jitter, cfg.specular_jitter, size=(2, n)) for _ in range(2))
    scene.dots = Dots(du, dv, jitter=(jit[0], jit[1]))
    frame = sample.frame
    new = StereoFrame(render(scene, LEFT), render(scene, RIGHT), frame.raw, frame.color, frame.cam)
    return SceneSample(new, sample.gt, sample.material, sample.occlusion, scene, sample.meta)


def default_sgm(cfg: SceneConfig) -> SgmParams:
    """SGM settings used for raw disparity: search range covers the scene, small islands dropped."""
    return SgmParams(d_max=int(math.ceil(cfg.disparity_range[1])) + 4, speckle_size=40, uniqueness_ratio=0.9)


def corrupt_raw(sample: SceneSample, rng, params: SgmParams | None = None) -> SceneSample:
    """Raw disparity = SGM on the (speckled) pair, plus optional extra degradation."""
    cfg = sample.scene.cfg if sample.scene is not None else SceneConfig()
    raw = compute_raw_disparity(sample.frame, params or default_sgm(cfg))
    values = raw.values.copy()
    valid = raw.valid.copy()
    h, w = values.shape
    for _ in range(cfg.dropout_patches):
        ph, pw = rng.integers(3, max(4, h // 6)), rng.integers(3, max(4, w // 6))
        y, x = rng.integers(0, h - ph), rng.integers(0, w - pw)
        valid[y : y + ph, x : x + pw] = False
    if cfg.specular_bias:
        spec = sample.material == SPECULAR
        values[spec] += rng.choice([-1.0, 1.0]) * cfg.specular_bias
    values = np.clip(values, 0, None).astype(np.float32).astype(np.float64)
    f = sample.frame
    frame = StereoFrame(f.left, f.right, DisparityMap(values, valid), f.color, f.cam)
    return SceneSample(frame, sample.gt, sample.material, sample.occlusion, sample.scene, sample.meta)


def make_sample(cfg: SceneConfig, seed, index=0, sgm_params: SgmParams | None = None) -> SceneSample:
    """generate -> speckle -> corrupt, all randomness from ``default_rng([seed, index])``."""
    rng = np.random.default_rng([int(seed), int(index)])
    s = generate_scene(cfg, rng)
    s = apply_speckle(s, cfg, rng)
    s = corrupt_raw(s, rng, sgm_params)
    s.meta = {"seed": int(seed), "index": int(index)}
    return s


# ------------------------------------------------------------- storage

def material_stats(samples):
    counts = np.zeros(4, dtype=np.int64)
    for s in samples:
        counts += np.bincount(s.material.ravel(), minlength=4)[:4]
    total = counts.sum()
    names = ("background", "diffuse", "specular", "transparent")
    return {n: float(c / total) for n, c in zip(names, counts)}


def write_dataset(root, samples, cfg: SceneConfig, seed, train_fraction=0.9, sgm_params=None):
    """One directory per sample plus ``manifest.json``; returns the manifest."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    n = len(samples)
    n_train = int(math.floor(train_fraction * n + 1e-9))
    names = []
    for i, s in enumerate(samples):
        name = f"sample_{i:05d}"
        d = root / name
        d.mkdir(exist_ok=True)
        save_pfm(s.frame.left, d / "left.pfm")
        save_pfm(s.frame.right, d / "right.pfm")
        save_pfm(s.gt.values.astype(np.float32), d / "gt.pfm")
        save_pfm(s.frame.raw.values.astype(np.float32), d / "raw.pfm")
        save_pgm(s.frame.raw.valid.astype(np.uint8) * 255, d / "valid.pgm")
        save_pgm(s.material, d / "material.pgm", maxval=3)
        save_pgm(s.occlusion.astype(np.uint8) * 255, d / "occlusion.pgm")
        if s.frame.color is not None:
            save_pfm(s.frame.color, d / "color.pfm")
        meta = {
            "schema_version": SCHEMA_VERSION,
            "seed": int(seed),
            "index": int(s.meta.get("index", i)),
            "split": "train" if i < n_train else "test",
            "scene_config": cfg.to_dict(),
            "sgm": (sgm_params or default_sgm(cfg)).to_dict(),
            "camera": s.frame.cam.to_dict() if s.frame.cam else None,
        }
        (d / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
        names.append(name)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "n": n,
        "seed": int(seed),
        "train": names[:n_train],
        "test": names[n_train:],
        "scene_config": cfg.to_dict(),
        "material_fraction": material_stats(samples),
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


REQUIRED_FILES = ("left.pfm", "right.pfm", "gt.pfm", "raw.pfm", "valid.pgm", "material.pgm", "meta.json")


def read_sample(d) -> SceneSample:
    d = Path(d)
    for f in REQUIRED_FILES:
        if not (d / f).exists():
            raise MissingFileError(f"sample {d.name}: missing {f}")
    meta = json.loads((d / "meta.json").read_text())
    if meta.get("schema_version") != SCHEMA_VERSION:
        raise SchemaMismatchError(f"sample {d.name}: schema {meta.get('schema_version')}")
    cam = CameraIntrinsics(**meta["camera"]) if meta.get("camera") else None
    color = load_image(d / "color.pfm") if (d / "color.pfm").exists() else None
    valid = load_image(d / "valid.pgm") > 0.5
    raw = DisparityMap(load_image(d / "raw.pfm").astype(np.float64), valid)
    frame = StereoFrame(load_image(d / "left.pfm"), load_image(d / "right.pfm"), raw, color, cam)
    gt_vals = load_image(d / "gt.pfm").astype(np.float64)
    gt = DisparityMap(gt_vals, np.ones(gt_vals.shape, bool))
    material = np.round(load_image(d / "material.pgm") * 3).astype(np.uint8)
    occ = (load_image(d / "occlusion.pgm") > 0.5) if (d / "occlusion.pgm").exists() else np.zeros(gt.shape, bool)
    return SceneSample(frame, gt, material, occ, None, meta)


def read_dataset(root, split=None):
    """Samples in manifest order, optionally only the ``train`` or ``test`` split."""
    root = Path(root)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise MissingFileError(f"{root}: missing manifest.json")
    manifest = json.loads(mpath.read_text())
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise SchemaMismatchError(f"manifest schema {manifest.get('schema_version')}")
    names = manifest["train"] + manifest["test"] if split is None else manifest[split]
    return [read_sample(root / n) for n in names]
