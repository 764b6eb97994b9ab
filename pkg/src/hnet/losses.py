"""Self-supervised stereo objective.

One branch's predicted disparity resamples the *other* branch's image along
the epipolar rows; the reconstruction is scored by an SSIM/L1 mix, an
edge-aware smoothness term regularizes the mean-normalized inverse depth,
and the per-scale, per-branch terms average into the training total.  Every
scale is first upsampled to full resolution, so reprojection always happens
against the full-size images.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import model as mdl
from . import tensor as t
from .tensor import Array

WARP_DIRECTIONS = ("left_from_right", "right_from_left")


@dataclasses.dataclass(frozen=True)
class LossConfig:
    gamma: float = 0.85            # SSIM share of the photometric mix
    smooth_weight: float = 0.001   # weight of the smoothness term
    scales: int = 4
    ssim_window: int = 3
    ssim_c1: float = 0.01 ** 2
    ssim_c2: float = 0.03 ** 2

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must be in [0,1]")
        if self.smooth_weight < 0:
            raise ValueError("smooth_weight must be >= 0")
        if self.scales < 1:
            raise ValueError("scales must be >= 1")
        if self.ssim_window != 3:
            raise ValueError("only the 3x3 SSIM window is supported")


@dataclasses.dataclass(frozen=True)
class LossReport:
    """Per-scale, per-branch parts plus the recombined training total."""
    photo_left: tuple
    photo_right: tuple
    smooth_left: tuple
    smooth_right: tuple
    smooth_weight: float
    total: float

    @property
    def photometric_total(self) -> float:
        m = len(self.photo_left)
        return sum(self.photo_left + self.photo_right) / (2 * m)

    @property
    def smoothness_total(self) -> float:
        m = len(self.smooth_left)
        return sum(self.smooth_left + self.smooth_right) / (2 * m)


# ---------------------------------------------------------------------------
# warping

def warp(source: Array, disparity: Array, direction: str) -> Array:
    """Horizontal bilinear resampling of ``source`` by a disparity map.

    ``left_from_right`` samples source column j - d (source is the right
    image, output lives in the left frame); ``right_from_left`` samples
    j + d.  Out-of-range positions clamp to the border column.
    """
    out, _ = warp_d(source, disparity, direction)
    return out


def warp_d(source: Array, disparity: Array, direction: str):
    if direction not in WARP_DIRECTIONS:
        raise ValueError(f"direction must be one of {WARP_DIRECTIONS}")
    if source.ndim != 3 or disparity.shape != (1,) + source.shape[1:]:
        raise ValueError(
            f"warp wants source [c,h,w] and disparity [1,h,w]; got "
            f"{source.shape} and {disparity.shape}")
    if np.any(disparity < 0):
        raise ValueError("disparity must be nonnegative")
    c, h, w = source.shape
    sign = -1.0 if direction == "left_from_right" else 1.0
    cols = np.arange(w)[None, None, :]
    pos = cols + sign * disparity            # [1,h,w]
    j0 = np.floor(pos).astype(int)
    frac = pos - j0
    j0c = np.clip(j0, 0, w - 1)
    j1c = np.clip(j0 + 1, 0, w - 1)
    idx0 = np.broadcast_to(j0c, (c, h, w))
    idx1 = np.broadcast_to(j1c, (c, h, w))
    s0 = np.take_along_axis(source, idx0, axis=2)
    s1 = np.take_along_axis(source, idx1, axis=2)
    out = (1.0 - frac) * s0 + frac * s1

    def vjp(gy):
        gsrc = np.zeros_like(source)
        ci = np.arange(c)[:, None, None]
        ri = np.arange(h)[None, :, None]
        np.add.at(gsrc, (np.broadcast_to(ci, (c, h, w)),
                         np.broadcast_to(ri, (c, h, w)), idx0), (1.0 - frac) * gy)
        np.add.at(gsrc, (np.broadcast_to(ci, (c, h, w)),
                         np.broadcast_to(ri, (c, h, w)), idx1), frac * gy)
        gdisp = sign * (gy * (s1 - s0)).sum(axis=0, keepdims=True)
        return gsrc, gdisp

    return out, vjp


# ---------------------------------------------------------------------------
# SSIM

def ssim(i1: Array, i2: Array, cfg: LossConfig = LossConfig()) -> Array:
    """Per-pixel, per-channel SSIM with clamped 3x3 box statistics."""
    s, _ = ssim_d(i1, i2, cfg)
    return s


def ssim_d(i1: Array, i2: Array, cfg: LossConfig):
    if i1.shape != i2.shape:
        raise ValueError(f"ssim shape mismatch: {i1.shape} vs {i2.shape}")
    c1, c2 = cfg.ssim_c1, cfg.ssim_c2
    mx = t.box3_mean(i1)
    my = t.box3_mean(i2)
    mxx = t.box3_mean(i1 * i1)
    myy = t.box3_mean(i2 * i2)
    mxy = t.box3_mean(i1 * i2)
    vx = mxx - mx * mx
    vy = myy - my * my
    vxy = mxy - mx * my
    n1 = 2.0 * mx * my + c1
    n2 = 2.0 * vxy + c2
    d1 = mx * mx + my * my + c1
    d2 = vx + vy + c2
    s = (n1 * n2) / (d1 * d2)

    def vjp(gs):
        gn1 = gs * n2 / (d1 * d2)
        gn2 = gs * n1 / (d1 * d2)
        gd1 = -gs * s / d1
        gd2 = -gs * s / d2
        gvx, gvy, gvxy = gd2, gd2, 2.0 * gn2
        gmx = 2.0 * my * gn1 + 2.0 * mx * gd1 - 2.0 * mx * gvx - my * gvxy
        gmy = 2.0 * mx * gn1 + 2.0 * my * gd1 - 2.0 * my * gvy - mx * gvxy
        gi1 = (t.box3_mean_vjp(i1, gmx) + 2.0 * i1 * t.box3_mean_vjp(i1, gvx)
               + i2 * t.box3_mean_vjp(i1, gvxy))
        gi2 = (t.box3_mean_vjp(i2, gmy) + 2.0 * i2 * t.box3_mean_vjp(i2, gvy)
               + i1 * t.box3_mean_vjp(i2, gvxy))
        return gi1, gi2

    return s, vjp


# ---------------------------------------------------------------------------
# photometric and smoothness terms

def photometric_loss(image: Array, recon: Array, cfg: LossConfig = LossConfig()) -> float:
    v, _ = photometric_loss_d(image, recon, cfg)
    return v


def photometric_map(image: Array, recon: Array, cfg: LossConfig = LossConfig()) -> Array:
    """Channel-averaged per-pixel photometric penalty [h,w]."""
    s, _ = ssim_d(image, recon, cfg)
    per = (cfg.gamma / 2.0) * (1.0 - s) + (1.0 - cfg.gamma) * np.abs(image - recon)
    return per.mean(axis=0)


def photometric_loss_d(image: Array, recon: Array, cfg: LossConfig):
    if image.shape != recon.shape:
        raise ValueError(f"photometric shape mismatch: {image.shape} vs {recon.shape}")
    s, ssim_vjp = ssim_d(image, recon, cfg)
    diff = image - recon
    per = (cfg.gamma / 2.0) * (1.0 - s) + (1.0 - cfg.gamma) * np.abs(diff)
    value = float(per.mean())

    def vjp(gv):
        gper = np.full_like(per, gv / per.size)
        gs = -(cfg.gamma / 2.0) * gper
        gdiff = (1.0 - cfg.gamma) * np.sign(diff) * gper
        gi1, gi2 = ssim_vjp(gs)
        return gi1 + gdiff, gi2 - gdiff

    return value, vjp


def smoothness_loss(disp_like: Array, image: Array) -> float:
    v, _ = smoothness_loss_d(disp_like, image)
    return v


def smoothness_loss_d(disp_like: Array, image: Array):
    """Edge-aware forward-difference smoothness of the mean-normalized map.

    The map is divided by its mean first, so the loss is invariant to
    positive rescaling; image gradients (channel-averaged) damp the penalty
    across intensity edges.
    """
    if disp_like.ndim != 3 or disp_like.shape[0] != 1:
        raise ValueError(f"disp_like must be [1,h,w], got {disp_like.shape}")
    if image.shape[1:] != disp_like.shape[1:]:
        raise ValueError(
            f"smoothness spatial mismatch: {image.shape} vs {disp_like.shape}")
    md = disp_like.mean()
    if md <= t.EPS_NORM:
        raise ValueError("mean of the disparity-like map is too small")
    dn = disp_like / md
    dx = dn[:, :, 1:] - dn[:, :, :-1]
    dy = dn[:, 1:, :] - dn[:, :-1, :]
    wx = np.exp(-np.abs(image[:, :, 1:] - image[:, :, :-1]).mean(axis=0))
    wy = np.exp(-np.abs(image[:, 1:, :] - image[:, :-1, :]).mean(axis=0))
    n = disp_like.shape[1] * disp_like.shape[2]
    value = float(((np.abs(dx[0]) * wx).sum() + (np.abs(dy[0]) * wy).sum()) / n)

    def vjp(gv):
        g = gv / n
        gdx = np.sign(dx) * wx[None] * g
        gdy = np.sign(dy) * wy[None] * g
        gdn = np.zeros_like(dn)
        gdn[:, :, 1:] += gdx
        gdn[:, :, :-1] -= gdx
        gdn[:, 1:, :] += gdy
        gdn[:, :-1, :] -= gdy
        inner = (gdn * disp_like).sum()
        return gdn / md - inner / (md * md * disp_like.size)

    return value, vjp


# ---------------------------------------------------------------------------
# multi-scale total

def total_loss(outputs_left, outputs_right, il: Array, ir: Array,
               camera: mdl.Camera, cfg: LossConfig) -> LossReport:
    report, _ = total_loss_d(outputs_left, outputs_right, il, ir, camera, cfg)
    return report


def total_loss_d(outputs_left, outputs_right, il: Array, ir: Array,
                 camera: mdl.Camera, cfg: LossConfig):
    """Differentiable total; vjp(g) -> cotangents for both output lists."""
    m = cfg.scales
    if len(outputs_left) != m or len(outputs_right) != m:
        raise ValueError(f"expected {m} scales per branch, got "
                         f"{len(outputs_left)}/{len(outputs_right)}")

    photo = {"l": [], "r": []}
    smooth = {"l": [], "r": []}
    scale_vjps = []
    for s in range(m):
        per_scale = []
        for branch, om, own, counterpart, direction in (
                ("l", outputs_left[s], il, ir, "left_from_right"),
                ("r", outputs_right[s], ir, il, "right_from_left")):
            factor = 1 << s
            if om.shape != (1, il.shape[1] // factor, il.shape[2] // factor):
                raise ValueError(
                    f"scale {s} map has shape {om.shape}, inconsistent with "
                    f"images {il.shape}")
            om_full = t.upsample_bilinear(om, factor)
            depth, depth_vjp = mdl.sigmoid_to_depth_d(om_full)
            disp, disp_vjp = mdl.depth_to_disparity_d(depth, camera.focal,
                                                      camera.baseline)
            inv = 1.0 / depth
            recon, warp_vjp = warp_d(counterpart, disp, direction)
            ap, ap_vjp = photometric_loss_d(own, recon, cfg)
            ds, ds_vjp = smoothness_loss_d(inv, own)
            photo[branch].append(ap)
            smooth[branch].append(ds)

            def back(g_ap, g_ds, om=om, om_full=om_full, depth=depth,
                     depth_vjp=depth_vjp, disp_vjp=disp_vjp, inv=inv,
                     warp_vjp=warp_vjp, ap_vjp=ap_vjp, ds_vjp=ds_vjp,
                     factor=factor):
                _, grecon = ap_vjp(g_ap)
                _, gdisp = warp_vjp(grecon)
                ginv = ds_vjp(g_ds)
                gdepth = disp_vjp(gdisp) - ginv / depth**2
                g_om_full = depth_vjp(gdepth)
                return t.upsample_bilinear_vjp(om, factor, g_om_full)

            per_scale.append(back)
        scale_vjps.append(per_scale)

    lam = cfg.smooth_weight
    total = 0.0
    for s in range(m):
        total += (photo["l"][s] + lam * smooth["l"][s]
                  + photo["r"][s] + lam * smooth["r"][s])
    total /= 2 * m

    report = LossReport(photo_left=tuple(photo["l"]), photo_right=tuple(photo["r"]),
                        smooth_left=tuple(smooth["l"]),
                        smooth_right=tuple(smooth["r"]),
                        smooth_weight=lam, total=float(total))

    def vjp(g_total):
        share = g_total / (2 * m)
        g_left = []
        g_right = []
        for s in range(m):
            back_l, back_r = scale_vjps[s]
            g_left.append(back_l(share, share * lam))
            g_right.append(back_r(share, share * lam))
        return g_left, g_right

    return report, vjp
