"""Procedural sign datasets: sprites, camera poses, backgrounds, compositing.

Signs are flat RGBA sprites drawn from a small vocabulary of outlines and
glyphs. A pinhole camera views the sign plane under a random pose; the warped
sprite is alpha-composited over a procedural urban or nature texture. Every
sample is reproducible from its own derived seed.
"""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, asdict, field
from typing import Iterator

import numpy as np
from scipy.ndimage import map_coordinates

SHAPES = ("circle", "triangle", "rectangle")
SHAPE_LETTERS = {"C": "circle", "T": "triangle", "R": "rectangle"}
ENVS = ("urban", "nature")
PALETTES = ("red", "blue", "gray")
CORRELATIONS = {"U": "uncorrelated", "C": "correlated"}


class ResampleSignal(Exception):
    """Raised when a drawn sample violates an invariant and must be redrawn."""


class DegeneratePose(ResampleSignal):
    pass


class EmptyMask(ResampleSignal):
    pass


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class ClassSpec:
    class_id: int
    shape: str
    glyph_id: int
    palette: str
    preferred_env: str  # "urban", "nature" or "both"


@dataclass(frozen=True)
class CameraStage:
    name: str
    sigma_roll: float
    sigma_pitch: float
    sigma_yaw: float

    @property
    def sigmas(self):
        return (self.sigma_roll, self.sigma_pitch, self.sigma_yaw)


STAGES = {
    "F": CameraStage("F", 0.0, 0.0, 0.0),
    "M": CameraStage("M", 1.5, 5.0, 40.0 / 3.0),
    "H": CameraStage("H", 3.0, 10.0, 80.0 / 3.0),
}


# glyph_id -> (primitive, mirrored). Mirrored entries are exact horizontal
# flips of their base; "+dot" variants differ from their base by one detail.
GLYPHS = (
    ("arrow", False), ("arrow", True),
    ("bar", False), ("bar+dot", False),
    ("diag", False), ("diag", True),
    ("dots", False), ("corner_dot", False), ("corner_dot", True),
    ("cross", False), ("cross+dot", False),
    ("chevron", False), ("chevron", True),
    ("ring", False), ("ring+dot", False),
)

# per shape: glyph pairs in the order classes of that shape consume them
_SHAPE_GLYPHS = {
    "circle": [(0, 1), (2, 3), (13, 14), (9, 10)],
    "triangle": [(4, 5), (7, 8), (2, 3), (13, 14)],
    "rectangle": [(11, 12), (9, 10), (0, 1), (6, 3)],
}
_SHAPE_PALETTES = {
    "circle": ("red", "blue", "gray", "red"),
    "triangle": ("red", "red", "gray", "red"),
    "rectangle": ("blue", "gray", "red", "blue"),
}


def build_catalog(n_classes: int = 12, n_both: int | None = None) -> list[ClassSpec]:
    """A shape-balanced class catalog.

    Class ids cycle circle, triangle, rectangle so any prefix of ``3m``
    classes is balanced. The last ``n_both`` classes prefer "both", the others
    urban or nature. Consecutive classes of the same shape share a glyph pair
    (mirror image or a one-detail variant) and so form a confusable pair.
    Both members of a pair prefer the same env, as a left and a right curve
    sit on the same kind of road; the env alternates between pairs while the
    palette changes every second pair, so colors spread over both envs.
    """
    if n_classes < 3:
        raise ValueError("need at least one class per shape")
    if n_both is None:
        n_both = n_classes // 6
    envs = _pair_envs(n_classes, n_both)
    out = []
    for cid in range(n_classes):
        shape = SHAPES[cid % 3]
        j = cid // 3  # rank among classes of this shape
        pairs = _SHAPE_GLYPHS[shape]
        pair = pairs[(j // 2) % len(pairs)]
        glyph = pair[j % 2]
        if j >= 2 * len(pairs):
            glyph = (glyph + j) % len(GLYPHS)
        # neighbouring pairs share a palette but not an env, so the env is
        # never implied by shape and color alone
        palette = _SHAPE_PALETTES[shape][(j // 4) % 4]
        out.append(ClassSpec(cid, shape, glyph, palette, envs.get(cid, "both")))
    return out


def _pair_envs(n_classes: int, n_both: int) -> dict:
    """Preferred env per non-"both" class: confusable partners (same shape,
    ranks 2k and 2k+1, i.e. ids c and c+3) agree, and urban/nature counts
    differ by at most one."""
    free = n_classes - n_both
    env, count, order = {}, dict.fromkeys(ENVS, 0), []
    for cid in range(free):
        if cid in env:
            continue
        group = [cid] + ([cid + 3] if (cid // 3) % 2 == 0 and cid + 3 < free else [])
        tie = count[ENVS[0]] == count[ENVS[1]]
        pick = ENVS[(cid // 6 + cid % 3) % 2] if tie else min(ENVS, key=count.get)
        for c in group:
            env[c] = pick
            count[pick] += 1
        order.append(group)
    if abs(count[ENVS[0]] - count[ENVS[1]]) > 1:
        # flip one class of the majority, preferring a class without a partner
        major, minor = sorted(ENVS, key=count.get, reverse=True)
        groups = [g for g in order if env[g[0]] == major]
        g = next((g for g in reversed(groups) if len(g) == 1), groups[-1])
        env[g[-1]] = minor
    return env


# ---------------------------------------------------------------- sprites

_COLORS = {
    # (border, fill, glyph)
    "red": ((0.80, 0.08, 0.10), (0.95, 0.95, 0.93), (0.08, 0.08, 0.08)),
    "blue": ((0.95, 0.95, 0.95), (0.10, 0.30, 0.75), (0.95, 0.95, 0.95)),
    "gray": ((0.30, 0.30, 0.32), (0.78, 0.78, 0.76), (0.15, 0.15, 0.15)),
}


def _outline(shape, X, Y, S, inset=1.0):
    """Inside test in doubled integer pixel coordinates; symmetric in X."""
    ax = np.abs(X)
    if shape == "circle":
        return X * X + Y * Y <= (inset * S) ** 2
    if shape == "triangle":
        # apex up; scaled about the centroid (at Y = S/3)
        c = S / 3.0
        yy = (Y - c) / inset + c
        xx = ax / inset
        return (yy <= S) & (2 * xx <= yy + S)
    if shape == "rectangle":
        return (ax <= inset * S) & (np.abs(Y) <= inset * S)
    raise ValueError(f"unknown shape {shape!r}")


def _disc(u, v, cu, cv, r):
    return (u - cu) ** 2 + (v - cv) ** 2 <= r * r


def _glyph(name, u, v):
    au = np.abs(u)
    box = (au <= 0.5) & (np.abs(v) <= 0.5)
    base, _, extra = name.partition("+")
    if base == "arrow":
        m = ((np.abs(v) <= 0.11) & (u >= -0.15) & (u <= 0.5)) | \
            ((u >= -0.5) & (u <= -0.05) & (np.abs(v) <= (u + 0.5) * 0.9))
    elif base == "bar":
        m = (au <= 0.12) & (np.abs(v) <= 0.5)
    elif base == "diag":
        m = (np.abs(u + v) <= 0.17) & box
    elif base == "dots":
        m = _disc(au, v, 0.3, 0.0, 0.15)
    elif base == "corner_dot":
        m = _disc(u, v, -0.3, -0.3, 0.18) | ((np.abs(v - 0.3) <= 0.09) & (au <= 0.45))
    elif base == "cross":
        m = ((au <= 0.1) | (np.abs(v) <= 0.1)) & box
    elif base == "chevron":
        m = (np.abs(u + 0.25 - np.abs(v) * 0.9) <= 0.13) & (np.abs(v) <= 0.45)
    elif base == "ring":
        r2 = u * u + v * v
        m = (r2 >= 0.23 ** 2) & (r2 <= 0.4 ** 2)
    else:
        raise ValueError(f"unknown glyph {name!r}")
    if extra == "dot":
        m = m | _disc(u, v, 0.38, 0.38, 0.12)
    return m


# glyph frame per shape: (scale, vertical centre) in normalized coordinates
_GLYPH_FRAME = {"circle": (0.95, 0.0), "triangle": (0.55, 0.3), "rectangle": (0.9, 0.0)}


def render_sign_canonical(spec: ClassSpec, size: int = 64) -> np.ndarray:
    """Frontal RGBA sprite, float64 in [0, 1], shape (size, size, 4).

    Pixel-centre coordinates are evaluated in doubled integer units so that
    symmetric outlines are exactly mirror-symmetric and a mirrored glyph is
    the exact horizontal flip of its base.
    """
    if size < 32:
        raise ValueError("sprite size must be at least 32")
    S = int(size)
    idx = 2 * np.arange(S) + 1 - S
    X, Y = np.meshgrid(idx, idx)  # X varies along columns
    outer = _outline(spec.shape, X, Y, S)
    inner = _outline(spec.shape, X, Y, S, inset=0.78)
    name, mirrored = GLYPHS[spec.glyph_id]
    scale, cv = _GLYPH_FRAME[spec.shape]
    u = X / S / scale
    v = (Y / S - cv) / scale
    if mirrored:
        u = -u
    glyph = _glyph(name, u, v) & inner
    border_c, fill_c, glyph_c = (np.array(c) for c in _COLORS[spec.palette])
    rgba = np.zeros((S, S, 4))
    rgba[..., :3] = np.where(inner[..., None], fill_c, border_c)
    rgba[glyph, :3] = glyph_c
    rgba[..., 3] = outer
    rgba[~outer, :3] = 0
    return rgba


# ---------------------------------------------------------------- camera

def sample_pose(stage: CameraStage, rng) -> tuple[float, float, float]:
    """(roll, pitch, yaw) in degrees, independent zero-mean normals."""
    return tuple(float(rng.normal(0.0, s)) if s > 0 else 0.0 for s in stage.sigmas)


def rotation_matrix(roll, pitch, yaw):
    """Camera-frame rotation applying yaw (about y), then pitch (x), then roll (z)."""
    r, p, y = np.radians([roll, pitch, yaw])
    Ry = np.array([[math.cos(y), 0, math.sin(y)], [0, 1, 0], [-math.sin(y), 0, math.cos(y)]])
    Rx = np.array([[1, 0, 0], [0, math.cos(p), -math.sin(p)], [0, math.sin(p), math.cos(p)]])
    Rz = np.array([[math.cos(r), -math.sin(r), 0], [math.sin(r), math.cos(r), 0], [0, 0, 1]])
    return Rz @ Rx @ Ry


def homography(pose, scale, translation, sprite_size, out_size):
    """3x3 map from sprite pixel coordinates to output pixel coordinates.

    The sprite lies on a plane facing the camera, centred on its own middle.
    Focal length equals ``out_size`` pixels and the principal point is the
    image centre. At the frontal pose the sprite spans ``scale * out_size``
    pixels, centred at ``out_size * (0.5 + translation)``.
    """
    S, f = float(sprite_size), float(out_size)
    if scale <= 0:
        raise DegeneratePose("scale must be positive")
    cx = cy = f / 2.0
    z0 = S / scale
    u0 = f * (0.5 + translation[0])
    v0 = f * (0.5 + translation[1])
    T = np.array([(u0 - cx) * z0 / f, (v0 - cy) * z0 / f, z0])
    R = rotation_matrix(*pose)
    K = np.array([[f, 0, cx], [0, f, cy], [0, 0, 1.0]])
    centre = np.array([[1, 0, -S / 2], [0, 1, -S / 2], [0, 0, 1.0]])
    H = K @ np.column_stack([R[:, 0], R[:, 1], T]) @ centre
    return H / H[2, 2]


def project(sprite, pose, scale=1.0, translation=(0.0, 0.0), out_size=None):
    """Warp an RGBA sprite into an ``out_size`` square frame (bilinear)."""
    S = sprite.shape[0]
    out_size = S if out_size is None else int(out_size)
    if max(abs(pose[1]), abs(pose[2])) >= 80:
        raise DegeneratePose(f"pitch/yaw too oblique: {pose}")
    H = homography(pose, scale, translation, S, out_size)
    if abs(np.linalg.det(H)) < 1e-12:
        raise DegeneratePose("singular homography")
    Hinv = np.linalg.inv(H)
    ys, xs = np.mgrid[0:out_size, 0:out_size] + 0.5
    pts = Hinv @ np.stack([xs.ravel(), ys.ravel(), np.ones(xs.size)])
    w = pts[2]
    # rays with w <= 0 meet the plane behind the camera: they see no sign
    ahead = w > 1e-12
    safe_w = np.where(ahead, w, 1.0)
    # sprite pixel centres sit at integer + 0.5
    sx = np.where(ahead, pts[0] / safe_w - 0.5, -2.0)
    sy = np.where(ahead, pts[1] / safe_w - 0.5, -2.0)
    alpha = sprite[..., 3]
    pre = sprite[..., :3] * alpha[..., None]
    out = np.empty((out_size, out_size, 4))
    coords = np.stack([sy, sx])
    a = map_coordinates(alpha, coords, order=1, mode="grid-constant", cval=0.0)
    out[..., 3] = a.reshape(out_size, out_size)
    for c in range(3):
        out[..., c] = map_coordinates(pre[..., c], coords, order=1, mode="grid-constant",
                                      cval=0.0).reshape(out_size, out_size)
    safe = np.where(out[..., 3] > 1e-12, out[..., 3], 1.0)
    out[..., :3] /= safe[..., None]
    np.clip(out, 0.0, 1.0, out=out)
    return out


# ---------------------------------------------------------------- backgrounds

@dataclass(frozen=True)
class BackgroundModel:
    env: str
    texture_seed: int
    params: dict = field(default_factory=dict, hash=False, compare=False)


URBAN_DEFAULTS = {"n_buildings": (3, 7), "window_cell": 0.08, "value_range": (0.25, 0.75)}
NATURE_DEFAULTS = {"octaves": (4, 8, 16), "weights": (0.55, 0.3, 0.15)}


def _value_noise(rng, size, grid):
    g = rng.random((grid + 1, grid + 1))
    t = (np.arange(size) + 0.5) * grid / size
    yy, xx = np.meshgrid(t, t, indexing="ij")
    return map_coordinates(g, [yy, xx], order=1, mode="nearest")


def _urban(rng, size, p):
    # sky-less facade: desaturated gray/brown base, blocks with window grids
    img = np.empty((size, size, 3))
    base = rng.uniform(*p["value_range"])
    tint = rng.uniform(-0.04, 0.06)
    img[:] = (base + tint, base, base - tint)
    lo, hi = p["n_buildings"]
    for _ in range(int(rng.integers(lo, hi + 1))):
        x0, x1 = np.sort(rng.integers(0, size + 1, 2))
        y0 = int(rng.integers(0, size // 2))
        if x1 - x0 < 2:
            continue
        v = rng.uniform(*p["value_range"])
        t = rng.uniform(-0.05, 0.08)
        img[y0:, x0:x1] = (v + t, v, v - t * 0.8)
        cell = max(2, int(round(p["window_cell"] * size)))
        win = rng.uniform(-0.25, 0.25)
        for wy in range(y0 + 1, size - 1, cell):
            for wx in range(x0 + 1, x1 - 1, cell):
                img[wy:wy + cell // 2, wx:wx + cell // 2] = np.clip(v + win, 0, 1)
    img += rng.normal(0, 0.02, img.shape)
    return np.clip(img, 0, 1)


def _nature(rng, size, p):
    n = sum(w * _value_noise(rng, size, g) for g, w in zip(p["octaves"], p["weights"]))
    green = np.array([rng.uniform(0.15, 0.3), rng.uniform(0.45, 0.65), rng.uniform(0.1, 0.2)])
    brown = np.array([rng.uniform(0.35, 0.5), rng.uniform(0.3, 0.4), rng.uniform(0.15, 0.25)])
    dark = green * rng.uniform(0.3, 0.5)
    t = n[..., None]
    img = np.where(t < 0.5, dark + (green - dark) * (t / 0.5), green + (brown - green) * ((t - 0.5) / 0.5) * 0.6)
    img += rng.normal(0, 0.02, img.shape)
    return np.clip(img, 0, 1)


def render_background(model: BackgroundModel, size: int) -> np.ndarray:
    rng = np.random.default_rng(model.texture_seed)
    if model.env == "urban":
        return _urban(rng, size, {**URBAN_DEFAULTS, **model.params})
    if model.env == "nature":
        return _nature(rng, size, {**NATURE_DEFAULTS, **model.params})
    raise ValueError(f"unknown environment {model.env!r}")


def choose_env(spec: ClassSpec, correlation: str, rng) -> str:
    if correlation == "correlated" and spec.preferred_env in ENVS:
        return spec.preferred_env
    if correlation not in ("correlated", "uncorrelated"):
        raise ValueError(f"unknown correlation mode {correlation!r}")
    return ENVS[int(rng.integers(2))]


def sample_background(spec: ClassSpec, correlation: str, rng, size: int = 64):
    """Pick the environment for one sample and render a fresh texture."""
    env = choose_env(spec, correlation, rng)
    model = BackgroundModel(env, int(rng.integers(2 ** 31)))
    return model, render_background(model, size)


# ---------------------------------------------------------------- compositing

def composite(warped, background, rng, jitter=0.15, max_noise=2.0 / 255):
    """Alpha-over, then photometric jitter on the whole frame.

    Returns the 8-bit RGB frame and the boolean mask, which is taken from the
    warped alpha before any jitter.
    """
    if warped.shape[:2] != background.shape[:2]:
        raise ValueError("sprite and background rasters differ in size")
    alpha = warped[..., 3:4]
    mask = warped[..., 3] > 0.5
    if not mask.any():
        raise EmptyMask("warped sprite covers no pixel")
    img = alpha * warped[..., :3] + (1 - alpha) * background
    contrast = 1 + rng.uniform(-jitter, jitter)
    bright = 1 + rng.uniform(-jitter, jitter)
    m = img.mean()
    img = ((img - m) * contrast + m) * bright
    img = img + rng.normal(0.0, rng.uniform(0.0, max_noise), img.shape)
    img = np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)
    return img, mask


# ---------------------------------------------------------------- datasets

@dataclass
class SampleRecord:
    image: np.ndarray  # (H, W, 3) uint8
    mask: np.ndarray  # (H, W) bool
    class_id: int
    index: int
    split: str
    pose: tuple
    scale: float
    translation: tuple
    background: BackgroundModel
    rng_seed: int

    def meta(self) -> dict:
        return {
            "class_id": self.class_id,
            "index": self.index,
            "pose": list(self.pose),
            "scale": self.scale,
            "translation": list(self.translation),
            "background": {"env": self.background.env, "texture_seed": self.background.texture_seed},
            "rng_seed": self.rng_seed,
        }


@dataclass
class DatasetConfig:
    name: str  # e.g. "UF", "CM", "CMT"
    catalog: list
    train_per_class: int = 200
    test_per_class: int = 100
    master_seed: int = 0
    image_size: int = 64
    sprite_size: int = 64
    scale_range: tuple = (0.45, 0.8)
    center_jitter: float = 0.1
    min_mask_fraction: float = 0.05
    resample_budget: int = 20

    @property
    def correlation(self) -> str:
        return CORRELATIONS[self.name[0]]

    @property
    def stage(self) -> CameraStage:
        return STAGES[self.name[1]]

    @property
    def shape_filter(self) -> str | None:
        return SHAPE_LETTERS[self.name[2]] if len(self.name) > 2 else None

    def classes(self) -> list:
        shape = self.shape_filter
        return [c for c in self.catalog if shape is None or c.shape == shape]


def parse_name(name: str):
    """Split a dataset name like "CMT" into (correlation, stage, shape or None)."""
    if not 2 <= len(name) <= 3 or name[0] not in CORRELATIONS or name[1] not in STAGES \
            or (len(name) == 3 and name[2] not in SHAPE_LETTERS):
        raise ValueError(f"bad dataset name {name!r}; expected [UC][FMH][CTR]?")
    return CORRELATIONS[name[0]], STAGES[name[1]], SHAPE_LETTERS.get(name[2:])


SPLITS = ("train", "test")


def sample_seed(master_seed: int, split: str, class_id: int, index: int) -> int:
    ss = np.random.SeedSequence([int(master_seed), SPLITS.index(split), int(class_id), int(index)])
    return int(ss.generate_state(1, np.uint64)[0])


def dataset_seed(master_seed: int, name: str) -> int:
    """Stable per-dataset seed so the six factorial cells draw distinct samples."""
    ss = np.random.SeedSequence([int(master_seed), zlib.crc32(name[:2].encode())])
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


_sprite_cache: dict = {}


def _sprite(spec: ClassSpec, size: int):
    key = (spec, size)
    if key not in _sprite_cache:
        _sprite_cache[key] = render_sign_canonical(spec, size)
    return _sprite_cache[key]


def generate_sample(cfg: DatasetConfig, spec: ClassSpec, split: str, index: int) -> SampleRecord:
    seed = sample_seed(cfg.master_seed, split, spec.class_id, index)
    rng = np.random.default_rng(seed)
    sprite = _sprite(spec, cfg.sprite_size)
    n = cfg.image_size
    last = None
    for _ in range(cfg.resample_budget):
        pose = sample_pose(cfg.stage, rng)
        scale = float(rng.uniform(*cfg.scale_range))
        tr = tuple(float(v) for v in rng.uniform(-cfg.center_jitter, cfg.center_jitter, 2))
        bg_model, bg = sample_background(spec, cfg.correlation, rng, n)
        try:
            warped = project(sprite, pose, scale, tr, n)
            img, mask = composite(warped, bg, rng)
        except ResampleSignal as err:
            last = err
            continue
        if mask.mean() < cfg.min_mask_fraction:
            last = EmptyMask(f"mask covers {mask.mean():.3f} of the frame")
            continue
        return SampleRecord(img, mask, spec.class_id, index, split, pose, scale, tr, bg_model, seed)
    raise GenerationError(
        f"{cfg.name}/{split}/{spec.class_id}/{index}: no valid sample in "
        f"{cfg.resample_budget} draws ({last})")


def generate_samples(cfg: DatasetConfig, split: str) -> Iterator[SampleRecord]:
    count = cfg.train_per_class if split == "train" else cfg.test_per_class
    for spec in cfg.classes():
        for i in range(count):
            yield generate_sample(cfg, spec, split, i)


def catalog_to_json(catalog) -> list:
    return [asdict(c) for c in catalog]


def catalog_from_json(items) -> list:
    return [ClassSpec(**c) for c in items]


def stage_to_json(stage: CameraStage) -> dict:
    return asdict(stage)
