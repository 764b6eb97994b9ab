"""Synthetic rectified stereo scenes with exact ground truth.

A scene is a stack of textured planes.  Each plane has an affine disparity
profile along the image columns (constant = fronto-parallel, varying =
horizontally slanted); textures are band-limited value noise evaluated at
continuous coordinates, so the right image can be rendered by exact
geometric resampling of the same continuous scene rather than by warping
pixels.  Occlusion is derived analytically: pixels that leave the right
image's field of view, pixels covered by a nearer plane in the right view,
and a small guard band around depth discontinuities where bilinear
sampling mixes surfaces.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import fileio
from . import losses as lss
from . import tensor as t
from .model import Camera
from .tensor import Array

EDGE_GUARD_PX = 1.5


@dataclasses.dataclass(frozen=True)
class PlaneSpec:
    """A textured plane; region None means full-frame background."""
    depth_left: float                      # depth at column 0
    depth_right: float                     # depth at the last column
    region: tuple[int, int, int, int] | None = None  # x0, x1, y0, y1 inclusive
    texture_seed: int = 0
    texture_cell: float = 10.0
    texture_amp: float = 0.35

    def __post_init__(self):
        for d in (self.depth_left, self.depth_right):
            if not (0.1 <= d <= 100.0):
                raise ValueError(f"plane depth {d} outside the representable [0.1, 100]")
        if not (0.0 < self.texture_amp <= 0.45):
            raise ValueError("texture_amp must be in (0, 0.45]")


@dataclasses.dataclass(frozen=True)
class SceneConfig:
    height: int
    width: int
    focal: float
    baseline: float
    planes: tuple[PlaneSpec, ...]
    noise: float = 0.0

    def __post_init__(self):
        if self.height < 4 or self.width < 8:
            raise ValueError("scene too small")
        if self.baseline <= 0 or self.focal <= 0:
            raise ValueError("focal and baseline must be positive")
        if not self.planes or self.planes[0].region is not None:
            raise ValueError("planes[0] must be the full-frame background")
        for p in self.planes[1:]:
            if p.region is None:
                raise ValueError("only the first plane may be full-frame")
            x0, x1, y0, y1 = p.region
            if not (0 <= x0 < x1 < self.width and 0 <= y0 < y1 < self.height):
                raise ValueError(f"plane region {p.region} outside the image")
        fb = self.focal * self.baseline
        for p in self.planes:
            d0, slope = _disparity_profile(p, self.width, fb)
            if slope >= 1.0:
                raise ValueError("disparity slope must stay below 1")
        bg = self.planes[0]
        for p in self.planes[1:]:
            if max(p.depth_left, p.depth_right) >= min(bg.depth_left, bg.depth_right):
                raise ValueError("foreground planes must be nearer than the background")

    @property
    def camera(self) -> Camera:
        return Camera(self.focal, self.baseline)


@dataclasses.dataclass
class StereoSample:
    il: Array                  # [3,h,w] in [0,1]
    ir: Array                  # [3,h,w]
    gt_disparity: Array        # [1,h,w] pixels, left frame
    gt_depth: Array            # [1,h,w] depth units
    occlusion: Array           # [h,w] bool, True = not reliably visible in both
    camera: Camera
    scene: SceneConfig
    seed: int


# ---------------------------------------------------------------------------
# procedural texture

_K1 = np.uint64(0x9E3779B97F4A7C15)
_K2 = np.uint64(0xBF58476D1CE4E5B9)
_K3 = np.uint64(0x94D049BB133111EB)
_KX = np.uint64(0xC2B2AE3D27D4EB4F)


def _hash01(ix: Array, iy: Array, seed: int) -> Array:
    """Integer lattice -> [0,1), platform-stable (pure uint64 mixing)."""
    seed_mix = np.uint64((seed * 0xD6E8FEB86659FD93) & 0xFFFFFFFFFFFFFFFF)
    h = (ix.astype(np.uint64) * _K1) ^ (iy.astype(np.uint64) * _KX)
    h = h ^ seed_mix
    h = h ^ (h >> np.uint64(30))
    h = h * _K2
    h = h ^ (h >> np.uint64(27))
    h = h * _K3
    h = h ^ (h >> np.uint64(31))
    return h.astype(np.float64) / 2.0 ** 64


def _quintic(f: Array) -> Array:
    return f * f * f * (f * (6.0 * f - 15.0) + 10.0)


def value_noise(xs: Array, ys: Array, seed: int, cell: float) -> Array:
    """Smooth lattice noise in [0,1] at arbitrary real coordinates."""
    u = np.asarray(xs, dtype=np.float64) / cell
    v = np.asarray(ys, dtype=np.float64) / cell
    iu = np.floor(u).astype(np.int64)
    iv = np.floor(v).astype(np.int64)
    fu = _quintic(u - iu)
    fv = _quintic(v - iv)
    c00 = _hash01(iu, iv, seed)
    c10 = _hash01(iu + 1, iv, seed)
    c01 = _hash01(iu, iv + 1, seed)
    c11 = _hash01(iu + 1, iv + 1, seed)
    top = c00 + (c10 - c00) * fu
    bot = c01 + (c11 - c01) * fu
    return top + (bot - top) * fv


def plane_texture(xs: Array, ys: Array, seed: int, cell: float, amp: float) -> Array:
    """Two-octave value noise per RGB channel, centered at 0.5."""
    chans = []
    for ch in range(3):
        s = seed + 7919 * ch
        n = (value_noise(xs, ys, s, cell)
             + 0.5 * value_noise(xs, ys, s + 101, cell / 2.0)) / 1.5
        chans.append(0.5 + amp * (2.0 * n - 1.0))
    return np.stack(chans)


# ---------------------------------------------------------------------------
# geometry

def _disparity_profile(plane: PlaneSpec, width: int, fb: float):
    """Affine left-frame disparity d(x) = d0 + slope * x for the plane."""
    d_start = fb / plane.depth_left
    d_end = fb / plane.depth_right
    slope = (d_end - d_start) / (width - 1)
    return d_start, slope


def _plane_seed(scene_seed: int, idx: int, texture_seed: int) -> int:
    return (scene_seed * 1000003 + idx * 131071 + texture_seed) & 0x7FFFFFFFFFFFFFFF


def generate_scene(cfg: SceneConfig, seed: int) -> StereoSample:
    """Deterministic render of both views with exact disparity/depth maps."""
    h, w = cfg.height, cfg.width
    fb = cfg.focal * cfg.baseline
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)

    profiles = [_disparity_profile(p, w, fb) for p in cfg.planes]
    seeds = [_plane_seed(seed, i, p.texture_seed) for i, p in enumerate(cfg.planes)]

    # left image and ground truth: later (nearer) planes paint over
    bg = cfg.planes[0]
    il = plane_texture(xs, ys, seeds[0], bg.texture_cell, bg.texture_amp)
    disp = profiles[0][0] + profiles[0][1] * xs
    owner = np.zeros((h, w), dtype=int)
    for i, p in enumerate(cfg.planes[1:], start=1):
        x0, x1, y0, y1 = p.region
        d0, slope = profiles[i]
        sel = (slice(y0, y1 + 1), slice(x0, x1 + 1))
        il[:, sel[0], sel[1]] = plane_texture(xs[sel], ys[sel], seeds[i],
                                              p.texture_cell, p.texture_amp)
        disp[sel] = d0 + slope * xs[sel]
        owner[sel] = i

    # right image by exact resampling of the continuous scene
    d0, slope = profiles[0]
    xl = (xs + d0) / (1.0 - slope)
    ir = plane_texture(xl, ys, seeds[0], bg.texture_cell, bg.texture_amp)
    spans = []
    for i, p in enumerate(cfg.planes[1:], start=1):
        x0, x1, y0, y1 = p.region
        d0, slope = profiles[i]
        lo = x0 - (d0 + slope * x0)
        hi = x1 - (d0 + slope * x1)
        spans.append((i, p, lo, hi))
        xl_p = (xs + d0) / (1.0 - slope)
        cover = np.zeros((h, w), dtype=bool)
        cover[y0:y1 + 1] = (xs[y0:y1 + 1] >= lo) & (xs[y0:y1 + 1] <= hi)
        tex = plane_texture(xl_p, ys, seeds[i], p.texture_cell, p.texture_amp)
        ir = np.where(cover[None], tex, ir)

    # occlusion reasoning in the left frame
    xr = xs - disp
    occ = (xr < 0.0) | (xr > w - 1.0)
    occ |= xs < float(disp.max())  # conservative left border band
    for i, p, lo, hi in spans:
        x0, x1, y0, y1 = p.region
        rows = np.zeros((h, w), dtype=bool)
        rows[y0:y1 + 1] = True
        covered = rows & (xr > lo) & (xr < hi) & (owner != i)
        near_edge = rows & ((np.abs(xr - lo) <= EDGE_GUARD_PX)
                            | (np.abs(xr - hi) <= EDGE_GUARD_PX))
        occ |= covered | near_edge

    if cfg.noise > 0:
        rng = t.make_rng((seed << 1) ^ 0x5EED)
        il = np.clip(il + cfg.noise * rng.standard_normal(il.shape), 0.0, 1.0)
        ir = np.clip(ir + cfg.noise * rng.standard_normal(ir.shape), 0.0, 1.0)

    return StereoSample(
        il=il, ir=ir,
        gt_disparity=disp[None],
        gt_depth=fb / disp[None],
        occlusion=occ,
        camera=cfg.camera, scene=cfg, seed=seed)


def warp_consistency_error(sample: StereoSample,
                           loss_cfg: lss.LossConfig | None = None) -> float:
    """Mean photometric penalty of the ground-truth warp outside occlusion.

    The occlusion mask is dilated by one pixel so SSIM windows never touch
    unreliable pixels.
    """
    loss_cfg = loss_cfg if loss_cfg is not None else lss.LossConfig()
    recon = lss.warp(sample.ir, sample.gt_disparity, "left_from_right")
    pmap = lss.photometric_map(sample.il, recon, loss_cfg)
    dilated = t.box3_sum(sample.occlusion.astype(np.float64)) > 0
    valid = ~dilated
    if not valid.any():
        raise ValueError("occlusion mask covers the whole image")
    return float(pmap[valid].mean())


# ---------------------------------------------------------------------------
# shipped presets

def scene_presets() -> dict[str, SceneConfig]:
    flat = SceneConfig(
        height=32, width=64, focal=50.0, baseline=0.02,
        planes=(PlaneSpec(depth_left=0.5, depth_right=0.5, texture_seed=3),))
    two_plane = SceneConfig(
        height=32, width=64, focal=50.0, baseline=0.02,
        planes=(PlaneSpec(depth_left=0.5, depth_right=0.5, texture_seed=5),
                PlaneSpec(depth_left=0.25, depth_right=0.25,
                          region=(24, 47, 8, 23), texture_seed=11,
                          texture_cell=8.0)))
    slanted = SceneConfig(
        height=32, width=64, focal=50.0, baseline=0.02,
        planes=(PlaneSpec(depth_left=0.6, depth_right=0.35, texture_seed=7,
                          texture_cell=14.0, texture_amp=0.3),
                PlaneSpec(depth_left=0.22, depth_right=0.22,
                          region=(10, 29, 6, 21), texture_seed=13,
                          texture_cell=12.0, texture_amp=0.3)))
    return {"flat": flat, "two-plane": two_plane, "slanted": slanted}


# ---------------------------------------------------------------------------
# config text round-trip

_SCENE_TOP_SCHEMA = {
    "height": int, "width": int, "focal": float, "baseline": float,
    "noise": float, "n_planes": int,
}
_PLANE_FIELDS = {
    "depth_left": float, "depth_right": float, "region": str,
    "texture_seed": int, "texture_cell": float, "texture_amp": float,
}


def scene_config_to_text(cfg: SceneConfig) -> str:
    entries = {
        "height": cfg.height, "width": cfg.width,
        "focal": repr(cfg.focal), "baseline": repr(cfg.baseline),
        "noise": repr(cfg.noise), "n_planes": len(cfg.planes),
    }
    for i, p in enumerate(cfg.planes):
        region = "full" if p.region is None else fileio.fmt_int_tuple(p.region)
        entries.update({
            f"plane{i}.depth_left": repr(p.depth_left),
            f"plane{i}.depth_right": repr(p.depth_right),
            f"plane{i}.region": region,
            f"plane{i}.texture_seed": p.texture_seed,
            f"plane{i}.texture_cell": repr(p.texture_cell),
            f"plane{i}.texture_amp": repr(p.texture_amp),
        })
    return fileio.dump_kv(entries)


def scene_config_from_text(text: str) -> SceneConfig:
    probe = {}
    for line in text.splitlines():
        line = line.strip()
        if line.startswith("n_planes"):
            probe["n_planes"] = int(line.partition("=")[2])
    n = probe.get("n_planes")
    if n is None or n < 1:
        raise ValueError("scene config needs n_planes >= 1")
    schema = dict(_SCENE_TOP_SCHEMA)
    for i in range(n):
        for field, conv in _PLANE_FIELDS.items():
            schema[f"plane{i}.{field}"] = conv
    kv = fileio.parse_kv(text, schema)
    planes = []
    for i in range(n):
        region_text = kv[f"plane{i}.region"]
        region = None if region_text == "full" else fileio.int_tuple(region_text)
        planes.append(PlaneSpec(
            depth_left=kv[f"plane{i}.depth_left"],
            depth_right=kv[f"plane{i}.depth_right"],
            region=region,
            texture_seed=kv[f"plane{i}.texture_seed"],
            texture_cell=kv[f"plane{i}.texture_cell"],
            texture_amp=kv[f"plane{i}.texture_amp"]))
    return SceneConfig(height=kv["height"], width=kv["width"], focal=kv["focal"],
                       baseline=kv["baseline"], planes=tuple(planes),
                       noise=kv["noise"])
