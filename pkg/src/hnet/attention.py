"""Mutual attention blocks between the two stereo branches.

Features arrive in the host layout [c,h,w] and are transposed to [h,c,w] so
the image row h acts as the batch axis: every retrieval and aggregation then
happens strictly within one epipolar row (MEA modes).  The MNL modes flatten
both spatial axes into a single global row of length h*w instead.

Retrieval is either a softmax over projected feature similarities (EG) or
the optimal-transport plan from :mod:`hnet.ot` (OT).  The aggregated signal
is delivered cross-branch with a residual add, so a zero-initialized value
projection leaves the host network untouched.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import ot as ot_mod
from . import tensor as t
from .ot import Conv1x1Params, RetrievalParams, SinkhornConfig
from .tensor import Array

MODES = ("eg-mea", "ot-mea", "eg-mnl", "ot-mnl")


@dataclasses.dataclass(frozen=True)
class AttentionParams:
    mode: str
    conv_v: Conv1x1Params                      # value projection, keeps c channels
    conv_q: Conv1x1Params | None = None        # EG query projection
    conv_k: Conv1x1Params | None = None        # EG key projection
    retrieval: RetrievalParams | None = None   # OT retrieval heads

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown attention mode {self.mode!r}")
        if self.conv_v.w.shape[0] != self.conv_v.w.shape[1]:
            raise ValueError("conv_v must preserve the channel count for the residual")
        if self.mode.startswith("eg") and (self.conv_q is None or self.conv_k is None):
            raise ValueError("EG modes need conv_q and conv_k")
        if self.mode.startswith("ot") and self.retrieval is None:
            raise ValueError("OT modes need retrieval params")


def param_shapes(c: int, mode: str) -> dict[str, tuple]:
    """Array shapes for one attention site with c-channel features."""
    shapes = {"conv_v.w": (c, c), "conv_v.b": (c,)}
    if mode.startswith("eg"):
        shapes.update({"conv_q.w": (c, c), "conv_q.b": (c,),
                       "conv_k.w": (c, c), "conv_k.b": (c,)})
    else:
        shapes.update({"conv_sim_1.w": (c, c), "conv_sim_1.b": (c,),
                       "conv_sim_2.w": (c, c), "conv_sim_2.b": (c,),
                       "conv_mass_1.w": (1, c), "conv_mass_1.b": (1,),
                       "conv_mass_2.w": (1, c), "conv_mass_2.b": (1,)})
    return shapes


def params_from_dict(mode: str, arrays: dict[str, Array]) -> AttentionParams:
    conv_v = Conv1x1Params(arrays["conv_v.w"], arrays["conv_v.b"])
    if mode.startswith("eg"):
        return AttentionParams(mode, conv_v,
                               conv_q=Conv1x1Params(arrays["conv_q.w"], arrays["conv_q.b"]),
                               conv_k=Conv1x1Params(arrays["conv_k.w"], arrays["conv_k.b"]))
    retrieval = RetrievalParams(
        Conv1x1Params(arrays["conv_sim_1.w"], arrays["conv_sim_1.b"]),
        Conv1x1Params(arrays["conv_sim_2.w"], arrays["conv_sim_2.b"]),
        Conv1x1Params(arrays["conv_mass_1.w"], arrays["conv_mass_1.b"]),
        Conv1x1Params(arrays["conv_mass_2.w"], arrays["conv_mass_2.b"]))
    return AttentionParams(mode, conv_v, retrieval=retrieval)


# ---------------------------------------------------------------------------
# retrieval functions

def eg_retrieve(x1: Array, x2: Array, params: AttentionParams) -> Array:
    """Softmax similarity retrieval on [h,c,w] inputs; rows of each [w,w]
    slice are stochastic."""
    m, _ = _eg_retrieve_d(x1, x2, params)
    return m


def _eg_retrieve_d(x1: Array, x2: Array, params: AttentionParams):
    if x1.shape != x2.shape:
        raise ValueError(f"eg_retrieve shape mismatch: {x1.shape} vs {x2.shape}")
    q = ot_mod._conv_rows(x1, params.conv_q.w, params.conv_q.b)
    k = ot_mod._conv_rows(x2, params.conv_k.w, params.conv_k.b)
    logits = np.einsum("hcj,hck->hjk", q, k)
    m = t.softmax_lastdim(logits)

    def vjp(gm):
        glogits = t.softmax_vjp_from_y(m, gm)
        gq = np.einsum("hjk,hck->hcj", glogits, k)
        gk = np.einsum("hjk,hcj->hck", glogits, q)
        gx1, gwq, gbq = ot_mod._conv_rows_vjp(x1, params.conv_q.w, gq)
        gx2, gwk, gbk = ot_mod._conv_rows_vjp(x2, params.conv_k.w, gk)
        return gx1, gx2, {"conv_q.w": gwq, "conv_q.b": gbq,
                          "conv_k.w": gwk, "conv_k.b": gbk}

    return m, vjp


def _retrieve_d(x1, x2, params: AttentionParams, cfg: SinkhornConfig):
    """Dispatch to the EG or OT retrieval; both return ([h,w,w], vjp)."""
    if params.mode.startswith("eg"):
        return _eg_retrieve_d(x1, x2, params)
    mm, mm_vjp = ot_mod.ot_retrieve_d(x1, x2, params.retrieval, cfg)
    return mm.values, mm_vjp


def mnl_retrieve(x1: Array, x2: Array, params: AttentionParams,
                 cfg: SinkhornConfig | None = None) -> Array:
    """Global-range retrieval: spatial axes flattened into one row of h*w."""
    cfg = cfg if cfg is not None else SinkhornConfig()
    f1 = _flatten_rows(x1)
    f2 = _flatten_rows(x2)
    m, _ = _retrieve_d(f1, f2, params, cfg)
    return m


def _flatten_rows(x: Array) -> Array:
    """[h,c,w] -> [1,c,h*w] with position index i*w + j."""
    h, c, w = x.shape
    return np.ascontiguousarray(np.transpose(x, (1, 0, 2))).reshape(1, c, h * w)


def _unflatten_rows(f: Array, h: int, w: int) -> Array:
    c = f.shape[1]
    return np.ascontiguousarray(np.transpose(f.reshape(c, h, w), (1, 0, 2)))


# ---------------------------------------------------------------------------
# aggregation

def mea_apply(xl: Array, xr: Array, params: AttentionParams, retrieve_fn):
    """Aggregate values through both retrieval directions.

    retrieve_fn(a, b) must return the [h,w,w] matching from a to b; the
    returned pair is (Y left->right, Y right->left) in [h,c,w] layout.
    """
    m12 = retrieve_fn(xl, xr)
    m21 = retrieve_fn(xr, xl)
    v1 = ot_mod._conv_rows(xl, params.conv_v.w, params.conv_v.b)
    v2 = ot_mod._conv_rows(xr, params.conv_v.w, params.conv_v.b)
    y12 = np.einsum("hcj,hjk->hck", v1, m12)
    y21 = np.einsum("hcj,hjk->hck", v2, m21)
    return y12, y21


def _aggregate_d(x_src: Array, m: Array, m_vjp, params: AttentionParams):
    """One direction of Eq.-style aggregation: conv_v(x_src) batched with m."""
    v = ot_mod._conv_rows(x_src, params.conv_v.w, params.conv_v.b)
    y = np.einsum("hcj,hjk->hck", v, m)

    def vjp(gy):
        gv = np.einsum("hck,hjk->hcj", gy, m)
        gm = np.einsum("hcj,hck->hjk", v, gy)
        gx_v, gwv, gbv = ot_mod._conv_rows_vjp(x_src, params.conv_v.w, gv)
        return gx_v, gm, gwv, gbv

    return y, vjp


# ---------------------------------------------------------------------------
# the full block

def attention_block(xl: Array, xr: Array, params: AttentionParams,
                    cfg: SinkhornConfig | None = None):
    """Cross-branch attention with residual delivery on [c,h,w] features."""
    out_l, out_r, _ = attention_block_d(xl, xr, params, cfg)
    return out_l, out_r


def attention_block_d(xl: Array, xr: Array, params: AttentionParams,
                      cfg: SinkhornConfig | None = None):
    """Differentiable block; vjp(g_l, g_r) -> (gxl, gxr, param grad dict)."""
    if xl.shape != xr.shape:
        raise ValueError(f"attention_block shape mismatch: {xl.shape} vs {xr.shape}")
    cfg = cfg if cfg is not None else SinkhornConfig()
    c, h, w = xl.shape
    mnl = params.mode.endswith("mnl")

    if mnl:
        # one global row of length h*w, position index i*w + j
        to_rows = lambda x: np.ascontiguousarray(x).reshape(1, c, h * w)
        to_host = lambda y: y.reshape(c, h, w)
    else:
        to_rows = lambda x: np.ascontiguousarray(np.transpose(x, (1, 0, 2)))
        to_host = lambda y: np.ascontiguousarray(np.transpose(y, (1, 0, 2)))

    al, ar = to_rows(xl), to_rows(xr)
    m12, m12_vjp = _retrieve_d(al, ar, params, cfg)
    m21, m21_vjp = _retrieve_d(ar, al, params, cfg)
    y12, y12_vjp = _aggregate_d(al, m12, m12_vjp, params)
    y21, y21_vjp = _aggregate_d(ar, m21, m21_vjp, params)

    # cross-direction delivery: each branch receives what was retrieved
    # from the other one
    out_l = xl + to_host(y21)
    out_r = xr + to_host(y12)

    def vjp(g_out_l, g_out_r):
        grads: dict[str, Array] = {}

        def acc(d):
            for k, v in d.items():
                grads[k] = grads.get(k, 0.0) + v

        gy21 = to_rows(g_out_l)
        gy12 = to_rows(g_out_r)

        ga_l, gm12, gwv1, gbv1 = y12_vjp(gy12)
        acc({"conv_v.w": gwv1, "conv_v.b": gbv1})
        ga_r, gm21, gwv2, gbv2 = y21_vjp(gy21)
        acc({"conv_v.w": gwv2, "conv_v.b": gbv2})

        g1, g2, gp = m12_vjp(gm12)
        gal = ga_l + g1
        gar = ga_r + g2
        acc(gp)
        g2b, g1b, gpb = m21_vjp(gm21)  # args were (ar, al)
        gar = gar + g2b
        gal = gal + g1b
        acc(gpb)

        gxl = g_out_l + to_host(gal)
        gxr = g_out_r + to_host(gar)
        return gxl, gxr, grads

    return out_l, out_r, vjp
