"""Float64 tensor kernels with explicit vector-Jacobian products.

Every differentiable operation is a plain forward function plus a ``*_vjp``
companion mapping the output cotangent back to input cotangents.  Higher
level code (attention blocks, the encoder-decoder, the losses) chains these
VJPs by hand in reverse order; there is no tape.

All arrays are C-contiguous float64.  Operations are pure and deterministic:
identical inputs give bitwise-identical outputs.
"""

from __future__ import annotations

import dataclasses
from typing import Callable, Sequence

import numpy as np

Array = np.ndarray

# Norms at or below this are treated as degenerate (uniform fallback).
EPS_NORM = 1e-12


def as_tensor(x) -> Array:
    """Coerce to a C-contiguous float64 array."""
    return np.ascontiguousarray(np.asarray(x, dtype=np.float64))


def check_finite(x: Array, what: str = "tensor") -> Array:
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{what} contains non-finite values")
    return x


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator; equal seeds give equal streams on any platform."""
    return np.random.Generator(np.random.PCG64(seed))


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ValueError(msg)


# ---------------------------------------------------------------------------
# matmul / softmax / conv1x1

def batched_matmul(a: Array, b: Array) -> Array:
    """Per-batch matrix product: out[i] = a[i] @ b[i] for [b,m,k] x [b,k,n]."""
    a, b = np.asarray(a), np.asarray(b)
    _require(a.ndim == 3 and b.ndim == 3,
             f"batched_matmul expects rank-3 operands, got {a.shape} and {b.shape}")
    _require(a.shape[0] == b.shape[0] and a.shape[2] == b.shape[1],
             f"batched_matmul shape mismatch: {a.shape} vs {b.shape}")
    # einsum keeps every batch slice numerically independent of the others
    return np.einsum("bmk,bkn->bmn", a, b)


def batched_matmul_vjp(a: Array, b: Array, gy: Array):
    ga = np.einsum("bmn,bkn->bmk", gy, b)
    gb = np.einsum("bmk,bmn->bkn", a, gy)
    return ga, gb


def softmax_lastdim(x: Array) -> Array:
    """Softmax along the last axis, computed with max subtraction."""
    x = np.asarray(x)
    _require(x.shape[-1] >= 1, "softmax_lastdim needs a non-empty last axis")
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_lastdim_vjp(x: Array, gy: Array) -> Array:
    y = softmax_lastdim(x)
    return softmax_vjp_from_y(y, gy)


def softmax_vjp_from_y(y: Array, gy: Array) -> Array:
    inner = (gy * y).sum(axis=-1, keepdims=True)
    return y * (gy - inner)


def conv1x1(x: Array, w: Array, b: Array) -> Array:
    """Per-pixel channel map on [c,h,w]: out[o,i,j] = sum_c w[o,c] x[c,i,j] + b[o]."""
    x, w, b = np.asarray(x), np.asarray(w), np.asarray(b)
    _require(x.ndim == 3 and w.ndim == 2 and b.ndim == 1,
             f"conv1x1 expects x[c,h,w], w[o,c], b[o]; got {x.shape}, {w.shape}, {b.shape}")
    _require(w.shape[1] == x.shape[0] and b.shape[0] == w.shape[0],
             f"conv1x1 channel mismatch: x has {x.shape[0]} channels, w is {w.shape}")
    return np.einsum("oc,chw->ohw", w, x) + b[:, None, None]


def conv1x1_vjp(x: Array, w: Array, b: Array, gy: Array):
    gx = np.einsum("oc,ohw->chw", w, gy)
    gw = np.einsum("ohw,chw->oc", gy, x)
    gb = gy.sum(axis=(1, 2))
    return gx, gw, gb


# ---------------------------------------------------------------------------
# normalization

def normalize(x: Array, axis: int, mode: str) -> Array:
    """Scale slices along ``axis`` to unit norm.

    ``euclidean`` divides by the L2 norm; ``l1`` requires nonnegative input
    and divides by the sum.  Slices whose norm is <= EPS_NORM map to the
    uniform vector (1/sqrt(n) per entry for euclidean, 1/n for l1) so dead
    features stay finite.
    """
    x = np.asarray(x)
    n = x.shape[axis]
    if mode == "euclidean":
        s = np.sqrt((x * x).sum(axis=axis, keepdims=True))
        fill = 1.0 / np.sqrt(n)
    elif mode == "l1":
        if np.any(x < 0):
            raise ValueError("l1 normalize requires nonnegative input; rectify first")
        s = x.sum(axis=axis, keepdims=True)
        fill = 1.0 / n
    else:
        raise ValueError(f"unknown normalize mode: {mode!r}")
    dead = s <= EPS_NORM
    safe = np.where(dead, 1.0, s)
    return np.where(dead, fill, x / safe)


def normalize_vjp(x: Array, axis: int, mode: str, gy: Array) -> Array:
    x = np.asarray(x)
    if mode == "euclidean":
        s = np.sqrt((x * x).sum(axis=axis, keepdims=True))
        dead = s <= EPS_NORM
        safe = np.where(dead, 1.0, s)
        inner = (gy * x).sum(axis=axis, keepdims=True)
        gx = gy / safe - x * inner / safe**3
    elif mode == "l1":
        s = x.sum(axis=axis, keepdims=True)
        dead = s <= EPS_NORM
        safe = np.where(dead, 1.0, s)
        inner = (gy * x).sum(axis=axis, keepdims=True)
        gx = gy / safe - inner / safe**2
    else:
        raise ValueError(f"unknown normalize mode: {mode!r}")
    # degenerate slices emit a constant, so no gradient flows through them
    return np.where(dead, 0.0, gx)


# ---------------------------------------------------------------------------
# elementwise suite

def relu(x: Array) -> Array:
    return np.maximum(np.asarray(x), 0.0)


def relu_vjp(x: Array, gy: Array) -> Array:
    return gy * (np.asarray(x) > 0)


def sigmoid(x: Array) -> Array:
    x = np.asarray(x)
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_vjp(x: Array, gy: Array) -> Array:
    y = sigmoid(x)
    return gy * y * (1.0 - y)


def exp(x: Array) -> Array:
    return np.exp(np.asarray(x))


def exp_vjp(x: Array, gy: Array) -> Array:
    return gy * np.exp(np.asarray(x))


def _require_same_shape(x, y, opname):
    _require(np.shape(x) == np.shape(y),
             f"{opname} shape mismatch: {np.shape(x)} vs {np.shape(y)}")


def add(x: Array, y: Array) -> Array:
    _require_same_shape(x, y, "add")
    return np.asarray(x) + np.asarray(y)


def add_vjp(x: Array, y: Array, gy: Array):
    return gy, gy


def sub(x: Array, y: Array) -> Array:
    _require_same_shape(x, y, "sub")
    return np.asarray(x) - np.asarray(y)


def sub_vjp(x: Array, y: Array, gy: Array):
    return gy, -gy


def mul(x: Array, y: Array) -> Array:
    _require_same_shape(x, y, "mul")
    return np.asarray(x) * np.asarray(y)


def mul_vjp(x: Array, y: Array, gy: Array):
    return gy * np.asarray(y), gy * np.asarray(x)


def absval(x: Array) -> Array:
    return np.abs(np.asarray(x))


def absval_vjp(x: Array, gy: Array) -> Array:
    return gy * np.sign(np.asarray(x))


def mean(x: Array) -> Array:
    """Mean over all entries, returned as a 0-d tensor."""
    return np.asarray(np.asarray(x).mean())


def mean_vjp(x: Array, gy: Array) -> Array:
    x = np.asarray(x)
    return np.full_like(x, float(gy) / x.size)


# ---------------------------------------------------------------------------
# bilinear upsampling

def _upsample_weights(n: int, factor: int) -> Array:
    """Dense [n*factor, n] interpolation matrix for one axis.

    Output sample p reads source position (p + 0.5)/factor - 0.5 with
    border-clamped bilinear weights (half-pixel-center alignment).
    """
    out = n * factor
    pos = (np.arange(out) + 0.5) / factor - 0.5
    i0 = np.floor(pos).astype(int)
    frac = pos - i0
    i1 = np.clip(i0 + 1, 0, n - 1)
    i0 = np.clip(i0, 0, n - 1)
    m = np.zeros((out, n))
    np.add.at(m, (np.arange(out), i0), 1.0 - frac)
    np.add.at(m, (np.arange(out), i1), frac)
    return m


def upsample_bilinear(x: Array, factor: int) -> Array:
    """Bilinear upsample [c,h,w] -> [c,h*f,w*f] with half-pixel-center alignment."""
    x = np.asarray(x)
    _require(x.ndim == 3, f"upsample_bilinear expects [c,h,w], got {x.shape}")
    _require(factor >= 1, "factor must be >= 1")
    if factor == 1:
        return x.copy()
    uh = _upsample_weights(x.shape[1], factor)
    uw = _upsample_weights(x.shape[2], factor)
    return np.einsum("ph,chw,qw->cpq", uh, x, uw)


def upsample_bilinear_vjp(x: Array, factor: int, gy: Array) -> Array:
    x = np.asarray(x)
    if factor == 1:
        return gy.copy()
    uh = _upsample_weights(x.shape[1], factor)
    uw = _upsample_weights(x.shape[2], factor)
    return np.einsum("ph,cpq,qw->chw", uh, gy, uw)


# ---------------------------------------------------------------------------
# 2-d convolution (used by the encoder/decoder blocks)

def conv2d(x: Array, w: Array, b: Array, stride: int = 1, pad: int = 0) -> Array:
    """Cross-correlation of [ci,h,w] with filters [co,ci,kh,kw]."""
    x, w, b = np.asarray(x), np.asarray(w), np.asarray(b)
    _require(x.ndim == 3 and w.ndim == 4,
             f"conv2d expects x[c,h,w] and w[o,c,kh,kw], got {x.shape}, {w.shape}")
    _require(w.shape[1] == x.shape[0],
             f"conv2d channel mismatch: x has {x.shape[0]} channels, w is {w.shape}")
    win = _conv_windows(x, w.shape[2], w.shape[3], stride, pad)
    return np.einsum("cijuv,ocuv->oij", win, w) + b[:, None, None]


def _conv_windows(x: Array, kh: int, kw: int, stride: int, pad: int) -> Array:
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad))) if pad else x
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    return win[:, ::stride, ::stride]


def conv2d_vjp(x: Array, w: Array, b: Array, gy: Array, stride: int = 1, pad: int = 0):
    x, w = np.asarray(x), np.asarray(w)
    kh, kw = w.shape[2], w.shape[3]
    win = _conv_windows(x, kh, kw, stride, pad)
    gw = np.einsum("cijuv,oij->ocuv", win, gy)
    gb = gy.sum(axis=(1, 2))
    hp, wp = x.shape[1] + 2 * pad, x.shape[2] + 2 * pad
    gxp = np.zeros((x.shape[0], hp, wp))
    ho, wo = gy.shape[1], gy.shape[2]
    for u in range(kh):
        for v in range(kw):
            tap = np.einsum("oij,oc->cij", gy, w[:, :, u, v])
            gxp[:, u:u + stride * (ho - 1) + 1:stride,
                v:v + stride * (wo - 1) + 1:stride] += tap
    if pad:
        return gxp[:, pad:-pad, pad:-pad], gw, gb
    return gxp, gw, gb


# ---------------------------------------------------------------------------
# 3x3 box mean with clamped windows (SSIM statistics)

def box3_sum(x: Array) -> Array:
    """Sum over the 3x3 neighborhood, zero-padded, on [..., h, w]."""
    xp = np.pad(x, [(0, 0)] * (x.ndim - 2) + [(1, 1), (1, 1)])
    out = np.zeros_like(np.asarray(x, dtype=np.float64))
    h, w = x.shape[-2], x.shape[-1]
    for du in range(3):
        for dv in range(3):
            out += xp[..., du:du + h, dv:dv + w]
    return out


def box3_count(h: int, w: int) -> Array:
    """Number of in-bounds pixels in each clamped 3x3 window."""
    return box3_sum(np.ones((h, w)))


def box3_mean(x: Array) -> Array:
    """Mean over the clamped 3x3 window (borders average fewer pixels)."""
    x = np.asarray(x)
    return box3_sum(x) / box3_count(x.shape[-2], x.shape[-1])


def box3_mean_vjp(x: Array, gy: Array) -> Array:
    cnt = box3_count(x.shape[-2], x.shape[-1])
    return box3_sum(gy / cnt)


# ---------------------------------------------------------------------------
# gradient checking

@dataclasses.dataclass(frozen=True)
class DiffOp:
    """A differentiable operation: forward map plus its vector-Jacobian product.

    ``forward(*inputs)`` returns one output array; ``vjp(*inputs, cotangent)``
    returns one cotangent per input.
    """
    name: str
    forward: Callable[..., Array]
    vjp: Callable[..., tuple]


def gradcheck(op: DiffOp, inputs: Sequence[Array], step: float = 1e-5,
              rng: np.random.Generator | None = None,
              sample: int | None = None) -> float:
    """Compare the op's VJP against central finite differences.

    The output is scalarized against a fixed random cotangent w, so the
    checked gradient of <w, forward(inputs)> is exactly what vjp returns.
    Per input, entrywise errors are normalized by the largest gradient
    magnitude of that input (plus a tiny floor), and the max over all
    checked entries of all inputs is returned.  ``sample`` limits the number
    of entries probed per input (None = all).
    """
    rng = rng if rng is not None else make_rng(0)
    inputs = [as_tensor(v) for v in inputs]
    for v in inputs:
        check_finite(v, "gradcheck input")
    y0 = op.forward(*inputs)
    w = rng.standard_normal(np.shape(y0))

    def loss(vals):
        return float(np.vdot(w, op.forward(*vals)))

    analytic = op.vjp(*inputs, w)
    _require(len(analytic) == len(inputs),
             f"{op.name}: vjp returned {len(analytic)} cotangents for {len(inputs)} inputs")
    worst = 0.0
    for k, x in enumerate(inputs):
        g = np.asarray(analytic[k], dtype=np.float64)
        _require(g.shape == x.shape,
                 f"{op.name}: cotangent {k} has shape {g.shape}, input is {x.shape}")
        flat_idx = np.arange(x.size)
        if sample is not None and sample < x.size:
            flat_idx = np.sort(rng.choice(x.size, size=sample, replace=False))
        num = np.zeros(flat_idx.size)
        for t, pos in enumerate(flat_idx):
            pert = [v.copy() if j == k else v for j, v in enumerate(inputs)]
            pert[k].flat[pos] += step
            fp = loss(pert)
            pert[k].flat[pos] -= 2 * step
            fm = loss(pert)
            num[t] = (fp - fm) / (2 * step)
        ana = g.flat[flat_idx]
        scale = max(np.abs(g).max() if g.size else 0.0,
                    np.abs(num).max() if num.size else 0.0)
        if scale <= 1e-7:
            # below the central-difference noise floor: both sides are zero
            continue
        worst = max(worst, float(np.abs(ana - num).max() / scale))
    return worst
