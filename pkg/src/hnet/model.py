"""Siamese encoder-decoder with cross-branch attention and sigmoid depth heads.

Both branches run the same residual down/up blocks with physically shared
weights (one array, two uses).  The deepest features are fused by
concatenation followed by one distinct conv per branch, the decoder mirrors
the encoder with same-branch skip connections, and the three deepest
encoder stages plus the first three decoder stages exchange information
through the attention blocks of :mod:`hnet.attention`.

Each decoder scale s ends in a shared 1-channel sigmoid head; the map is
converted to depth via D = 1 / (a*sigmoid + b) with a, b fixed so depths
cover [0.1, 100].
"""

from __future__ import annotations

import dataclasses
import hashlib
import io
import struct

import numpy as np

from . import attention as att
from . import fileio
from . import tensor as t
from .ot import SinkhornConfig
from .tensor import Array

ATTENTION_CHOICES = ("off",) + att.MODES

CHECKPOINT_MAGIC = b"HNETCKPT"
CHECKPOINT_VERSION = 1


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    height: int
    width: int
    widths: tuple[int, ...] = (8, 16, 32)
    scales: int = 3
    attention: str = "ot-mea"
    sinkhorn: SinkhornConfig = dataclasses.field(default_factory=SinkhornConfig)

    def __post_init__(self):
        n = len(self.widths)
        if n == 0 or any(c <= 0 for c in self.widths):
            raise ValueError("widths must be positive and non-empty")
        if self.height <= 0 or self.width <= 0:
            raise ValueError("image size must be positive")
        if self.height % (1 << n) or self.width % (1 << n):
            raise ValueError(
                f"image size {self.height}x{self.width} must be divisible by 2^{n}")
        if not (1 <= self.scales <= n):
            raise ValueError(f"scales must be in [1, {n}], got {self.scales}")
        if self.attention not in ATTENTION_CHOICES:
            raise ValueError(f"attention must be one of {ATTENTION_CHOICES}")
        if self.attention != "off" and n < 3:
            raise ValueError("attention needs at least 3 stages")

    @property
    def n_stage(self) -> int:
        return len(self.widths)


@dataclasses.dataclass(frozen=True)
class Camera:
    """Rectified-pair constants: focal length in pixels, baseline in depth units."""
    focal: float
    baseline: float

    def __post_init__(self):
        if self.focal <= 0 or self.baseline <= 0:
            raise ValueError("focal and baseline must be positive")


@dataclasses.dataclass(frozen=True)
class DepthTransform:
    """D = 1 / (a * sigmoid + b); defaults pin D to [0.1, 100]."""
    a: float = 9.99
    b: float = 0.01

    @property
    def d_min(self) -> float:
        return 1.0 / (self.a + self.b)

    @property
    def d_max(self) -> float:
        return 1.0 / self.b


DEPTH_TRANSFORM = DepthTransform()


def sigmoid_to_depth(omega: Array, transform: DepthTransform = DEPTH_TRANSFORM) -> Array:
    d, _ = sigmoid_to_depth_d(omega, transform)
    return d


def sigmoid_to_depth_d(omega: Array, transform: DepthTransform = DEPTH_TRANSFORM):
    tr = transform
    denom = tr.a * omega + tr.b
    raw = 1.0 / denom
    # clip absorbs float roundoff at the interval ends
    depth = np.clip(raw, tr.d_min, tr.d_max)
    inside = (raw > tr.d_min) & (raw < tr.d_max)

    def vjp(gd):
        return np.where(inside, -tr.a * gd / denom**2, 0.0)

    return depth, vjp


def depth_to_disparity(depth: Array, focal: float, baseline: float) -> Array:
    disp, _ = depth_to_disparity_d(depth, focal, baseline)
    return disp


def depth_to_disparity_d(depth: Array, focal: float, baseline: float):
    if np.any(depth <= 0):
        raise ValueError("depth must be positive")
    fb = focal * baseline
    disp = fb / depth

    def vjp(gdisp):
        return -fb * gdisp / depth**2

    return disp, vjp


def disparity_to_depth(disp: Array, focal: float, baseline: float) -> Array:
    if np.any(disp <= 0):
        raise ValueError("disparity must be positive")
    return focal * baseline / disp


# ---------------------------------------------------------------------------
# parameters

@dataclasses.dataclass
class ModelParams:
    config: ModelConfig
    arrays: dict[str, Array]

    def names(self) -> list[str]:
        return sorted(self.arrays)

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.arrays.items()})


class GradDict(dict):
    """Accumulates parameter cotangents by name."""

    def add(self, key: str, value: Array) -> None:
        cur = self.get(key)
        self[key] = np.array(value, dtype=np.float64) if cur is None else cur + value


def _decoder_plan(widths: tuple[int, ...]):
    """(in_channels, skip_channels, out_channels) per decoder block."""
    n = len(widths)
    plan = []
    prev = widths[-1]
    for t_idx in range(n):
        skip = widths[n - 2 - t_idx] if t_idx <= n - 2 else 0
        out = widths[n - 2 - t_idx] if t_idx <= n - 2 else widths[0]
        plan.append((prev, skip, out))
        prev = out
    return plan


def attention_sites(config: ModelConfig) -> list[tuple[str, int]]:
    """(param prefix, channel count) for every attention insertion site."""
    if config.attention == "off":
        return []
    n = config.n_stage
    plan = _decoder_plan(config.widths)
    sites = [(f"att.enc{i}", config.widths[i]) for i in range(n - 3, n)]
    sites += [(f"att.dec{t_idx}", plan[t_idx][2]) for t_idx in range(min(3, n))]
    return sites


def param_shapes(config: ModelConfig) -> dict[str, tuple]:
    """Every named parameter array and its shape, in build order."""
    shapes: dict[str, tuple] = {}
    widths = config.widths
    n = config.n_stage
    c_in = 3
    for i, c_out in enumerate(widths):
        shapes[f"enc{i}.conv1.w"] = (c_out, c_in, 3, 3)
        shapes[f"enc{i}.conv1.b"] = (c_out,)
        shapes[f"enc{i}.conv2.w"] = (c_out, c_out, 3, 3)
        shapes[f"enc{i}.conv2.b"] = (c_out,)
        shapes[f"enc{i}.proj.w"] = (c_out, c_in, 1, 1)
        shapes[f"enc{i}.proj.b"] = (c_out,)
        c_in = c_out
    top = widths[-1]
    for side in ("left", "right"):
        shapes[f"fuse.{side}.w"] = (top, 2 * top, 3, 3)
        shapes[f"fuse.{side}.b"] = (top,)
    for t_idx, (prev, skip, out) in enumerate(_decoder_plan(widths)):
        cin = prev + skip
        shapes[f"dec{t_idx}.conv1.w"] = (out, cin, 3, 3)
        shapes[f"dec{t_idx}.conv1.b"] = (out,)
        shapes[f"dec{t_idx}.conv2.w"] = (out, out, 3, 3)
        shapes[f"dec{t_idx}.conv2.b"] = (out,)
        shapes[f"dec{t_idx}.proj.w"] = (out, cin, 1, 1)
        shapes[f"dec{t_idx}.proj.b"] = (out,)
    plan = _decoder_plan(widths)
    for s in range(config.scales):
        shapes[f"head{s}.w"] = (1, plan[n - 1 - s][2], 3, 3)
        shapes[f"head{s}.b"] = (1,)
    for prefix, c in attention_sites(config):
        for field, shape in att.param_shapes(c, config.attention).items():
            shapes[f"{prefix}.{field}"] = shape
    return shapes


def _name_seeded_rng(seed: int, name: str) -> np.random.Generator:
    digest = hashlib.sha256(name.encode()).digest()[:8]
    sub = int.from_bytes(digest, "little")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, sub])))


def build(config: ModelConfig, seed: int) -> ModelParams:
    """Fan-in-scaled uniform init, drawn per parameter name so shared layers
    match bit-for-bit across configs; value projections start at zero."""
    arrays: dict[str, Array] = {}
    for name, shape in param_shapes(config).items():
        if ".conv_v." in name:
            arrays[name] = np.zeros(shape)
            continue
        fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else int(shape[0])
        bound = 1.0 / np.sqrt(max(fan_in, 1))
        rng = _name_seeded_rng(seed, name)
        arrays[name] = rng.uniform(-bound, bound, size=shape)
    return ModelParams(config, arrays)


def param_count(params: ModelParams, breakdown: bool = False):
    """Exact parameter totals; with breakdown, per-component counts."""
    comps = {"encoder": 0, "fusion": 0, "decoder": 0, "heads": 0, "attention": 0}
    for name, arr in params.arrays.items():
        comps[_component_of(name)] += arr.size
    total = sum(comps.values())
    if breakdown:
        return total, comps
    return total


def _component_of(name: str) -> str:
    if name.startswith("att."):
        return "attention"
    if name.startswith("enc"):
        return "encoder"
    if name.startswith("fuse."):
        return "fusion"
    if name.startswith("dec"):
        return "decoder"
    if name.startswith("head"):
        return "heads"
    raise ValueError(f"unrecognized parameter name {name!r}")


def expected_param_count(config: ModelConfig) -> dict[str, int]:
    """Analytic per-component counts derived from the config alone."""
    comps = {"encoder": 0, "fusion": 0, "decoder": 0, "heads": 0, "attention": 0}
    for name, shape in param_shapes(config).items():
        comps[_component_of(name)] += int(np.prod(shape))
    comps["total"] = sum(comps.values())
    return comps


# ---------------------------------------------------------------------------
# layers

def _conv_layer_d(params: ModelParams, key: str, x: Array, stride: int, pad: int):
    w = params.arrays[key + ".w"]
    b = params.arrays[key + ".b"]
    y = t.conv2d(x, w, b, stride, pad)

    def back(gy, grads: GradDict):
        gx, gw, gb = t.conv2d_vjp(x, w, b, gy, stride, pad)
        grads.add(key + ".w", gw)
        grads.add(key + ".b", gb)
        return gx

    return y, back


def _res_down_d(params: ModelParams, key: str, x: Array):
    h1, back1 = _conv_layer_d(params, key + ".conv1", x, 2, 1)
    a1 = t.relu(h1)
    h2, back2 = _conv_layer_d(params, key + ".conv2", a1, 1, 1)
    sc, backp = _conv_layer_d(params, key + ".proj", x, 2, 0)
    pre = h2 + sc
    y = t.relu(pre)

    def back(gy, grads: GradDict):
        gpre = t.relu_vjp(pre, gy)
        ga1 = back2(gpre, grads)
        gh1 = t.relu_vjp(h1, ga1)
        return back1(gh1, grads) + backp(gpre, grads)

    return y, back


def _res_up_d(params: ModelParams, key: str, x: Array, skip: Array | None):
    up = t.upsample_bilinear(x, 2)
    z = np.concatenate([up, skip], axis=0) if skip is not None else up
    c_up = up.shape[0]
    h1, back1 = _conv_layer_d(params, key + ".conv1", z, 1, 1)
    a1 = t.relu(h1)
    h2, back2 = _conv_layer_d(params, key + ".conv2", a1, 1, 1)
    sc, backp = _conv_layer_d(params, key + ".proj", z, 1, 0)
    pre = h2 + sc
    y = t.relu(pre)

    def back(gy, grads: GradDict):
        gpre = t.relu_vjp(pre, gy)
        ga1 = back2(gpre, grads)
        gh1 = t.relu_vjp(h1, ga1)
        gz = back1(gh1, grads) + backp(gpre, grads)
        gup = gz[:c_up]
        gskip = gz[c_up:] if skip is not None else None
        return t.upsample_bilinear_vjp(x, 2, gup), gskip

    return y, back


def _head_d(params: ModelParams, key: str, x: Array):
    z, backz = _conv_layer_d(params, key, x, 1, 1)
    omega = t.sigmoid(z)

    def back(gomega, grads: GradDict):
        return backz(t.sigmoid_vjp(z, gomega), grads)

    return omega, back


def _att_params(params: ModelParams, prefix: str, mode: str) -> att.AttentionParams:
    fields = att.param_shapes(params.arrays[prefix + ".conv_v.w"].shape[0], mode)
    arrays = {f: params.arrays[f"{prefix}.{f}"] for f in fields}
    return att.params_from_dict(mode, arrays)


# ---------------------------------------------------------------------------
# forward

def forward(il: Array, ir: Array, params: ModelParams, want_features: bool = False):
    """Multi-scale sigmoid maps for both branches; scale 0 is full resolution."""
    sig_l, sig_r, _, feats = _forward_impl(il, ir, params)
    if want_features:
        return sig_l, sig_r, feats
    return sig_l, sig_r


def forward_d(il: Array, ir: Array, params: ModelParams):
    """Differentiable forward; vjp(g_sig_l, g_sig_r, grads) -> (g_il, g_ir)."""
    sig_l, sig_r, vjp, _ = _forward_impl(il, ir, params)
    return sig_l, sig_r, vjp


def _check_image(x: Array, cfg: ModelConfig, what: str):
    if x.shape != (3, cfg.height, cfg.width):
        raise ValueError(
            f"{what} must be [3,{cfg.height},{cfg.width}], got {x.shape}")
    if np.min(x) < -1e-12 or np.max(x) > 1 + 1e-12:
        raise ValueError(f"{what} values must lie in [0,1]")


def _forward_impl(il: Array, ir: Array, params: ModelParams):
    cfg = params.config
    _check_image(il, cfg, "left image")
    _check_image(ir, cfg, "right image")
    n = cfg.n_stage
    use_att = cfg.attention != "off"

    enc_l: list[Array] = []
    enc_r: list[Array] = []
    enc_steps = []
    xl, xr = il, ir
    for i in range(n):
        xl, bl = _res_down_d(params, f"enc{i}", xl)
        xr, br = _res_down_d(params, f"enc{i}", xr)
        site = None
        if use_att and i >= n - 3:
            ap = _att_params(params, f"att.enc{i}", cfg.attention)
            xl, xr, ba = att.attention_block_d(xl, xr, ap, cfg.sinkhorn)
            site = (f"att.enc{i}", ba)
        enc_l.append(xl)
        enc_r.append(xr)
        enc_steps.append((bl, br, site))

    cat_l = np.concatenate([enc_l[-1], enc_r[-1]], axis=0)
    cat_r = np.concatenate([enc_r[-1], enc_l[-1]], axis=0)
    xl, bfl = _conv_layer_d(params, "fuse.left", cat_l, 1, 1)
    xr, bfr = _conv_layer_d(params, "fuse.right", cat_r, 1, 1)

    m = cfg.scales
    sig_l: list = [None] * m
    sig_r: list = [None] * m
    dec_steps = []
    for t_idx in range(n):
        skip_idx = n - 2 - t_idx
        skip_l = enc_l[skip_idx] if skip_idx >= 0 else None
        skip_r = enc_r[skip_idx] if skip_idx >= 0 else None
        xl, bl = _res_up_d(params, f"dec{t_idx}", xl, skip_l)
        xr, br = _res_up_d(params, f"dec{t_idx}", xr, skip_r)
        site = None
        if use_att and t_idx < 3:
            ap = _att_params(params, f"att.dec{t_idx}", cfg.attention)
            xl, xr, ba = att.attention_block_d(xl, xr, ap, cfg.sinkhorn)
            site = (f"att.dec{t_idx}", ba)
        head = None
        s = n - 1 - t_idx
        if s < m:
            om_l, bhl = _head_d(params, f"head{s}", xl)
            om_r, bhr = _head_d(params, f"head{s}", xr)
            sig_l[s], sig_r[s] = om_l, om_r
            head = (s, bhl, bhr)
        dec_steps.append((skip_idx, bl, br, site, head, xl.shape))

    feats = {"enc_left": enc_l, "enc_right": enc_r}

    def vjp(g_sig_l, g_sig_r, grads: GradDict):
        genc_l = [None] * n
        genc_r = [None] * n

        def accum(slot, idx, val):
            slot[idx] = val if slot[idx] is None else slot[idx] + val

        gxl = None
        gxr = None
        for (skip_idx, bl, br, site, head, out_shape) in reversed(dec_steps):
            if gxl is None:
                gxl = np.zeros(out_shape)
                gxr = np.zeros(out_shape)
            if head is not None:
                s, bhl, bhr = head
                if g_sig_l[s] is not None:
                    gxl = gxl + bhl(g_sig_l[s], grads)
                if g_sig_r[s] is not None:
                    gxr = gxr + bhr(g_sig_r[s], grads)
            if site is not None:
                prefix, ba = site
                gxl, gxr, gp = ba(gxl, gxr)
                for k, v in gp.items():
                    grads.add(f"{prefix}.{k}", v)
            gxl, gskip_l = bl(gxl, grads)
            gxr, gskip_r = br(gxr, grads)
            if skip_idx >= 0:
                accum(genc_l, skip_idx, gskip_l)
                accum(genc_r, skip_idx, gskip_r)

        gcat_l = bfl(gxl, grads)
        gcat_r = bfr(gxr, grads)
        top = cfg.widths[-1]
        accum(genc_l, n - 1, gcat_l[:top] + gcat_r[top:])
        accum(genc_r, n - 1, gcat_r[:top] + gcat_l[top:])

        gxl = genc_l[n - 1]
        gxr = genc_r[n - 1]
        for i in range(n - 1, -1, -1):
            bl, br, site = enc_steps[i]
            if i < n - 1:
                if genc_l[i] is not None:
                    gxl = gxl + genc_l[i]
                if genc_r[i] is not None:
                    gxr = gxr + genc_r[i]
            if site is not None:
                prefix, ba = site
                gxl, gxr, gp = ba(gxl, gxr)
                for k, v in gp.items():
                    grads.add(f"{prefix}.{k}", v)
            gxl = bl(gxl, grads)
            gxr = br(gxr, grads)
        return gxl, gxr

    return sig_l, sig_r, vjp, feats


# ---------------------------------------------------------------------------
# checkpoints

CONFIG_SCHEMA = {
    "height": int,
    "width": int,
    "widths": fileio.int_tuple,
    "scales": int,
    "attention": str,
    "sinkhorn_epsilon": float,
    "sinkhorn_max_iters": int,
    "sinkhorn_tol": float,
}


def config_to_text(cfg: ModelConfig) -> str:
    return fileio.dump_kv({
        "height": cfg.height,
        "width": cfg.width,
        "widths": fileio.fmt_int_tuple(cfg.widths),
        "scales": cfg.scales,
        "attention": cfg.attention,
        "sinkhorn_epsilon": repr(cfg.sinkhorn.epsilon),
        "sinkhorn_max_iters": cfg.sinkhorn.max_iters,
        "sinkhorn_tol": repr(cfg.sinkhorn.tol),
    })


def config_from_text(text: str) -> ModelConfig:
    kv = fileio.parse_kv(text, CONFIG_SCHEMA)
    missing = set(CONFIG_SCHEMA) - set(kv)
    if missing:
        raise ValueError(f"model config missing keys: {sorted(missing)}")
    return ModelConfig(
        height=kv["height"], width=kv["width"], widths=kv["widths"],
        scales=kv["scales"], attention=kv["attention"],
        sinkhorn=SinkhornConfig(kv["sinkhorn_epsilon"], kv["sinkhorn_max_iters"],
                                kv["sinkhorn_tol"]))


def save_checkpoint(path: str, params: ModelParams) -> None:
    """Binary checkpoint; round-trips bitwise (float64 little-endian payload)."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    cfg_text = config_to_text(params.config).encode()
    buf.write(struct.pack("<I", len(cfg_text)))
    buf.write(cfg_text)
    names = params.names()
    buf.write(struct.pack("<I", len(names)))
    for name in names:
        arr = params.arrays[name]
        encoded = name.encode()
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<B", arr.ndim))
        for dim in arr.shape:
            buf.write(struct.pack("<I", dim))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_checkpoint(path: str) -> ModelParams:
    with open(path, "rb") as f:
        data = f.read()
    pos = 0

    def take(nbytes):
        nonlocal pos
        chunk = data[pos:pos + nbytes]
        if len(chunk) != nbytes:
            raise ValueError("truncated checkpoint")
        pos += nbytes
        return chunk

    if take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise ValueError("not a model checkpoint (bad magic)")
    version = struct.unpack("<I", take(4))[0]
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    cfg_len = struct.unpack("<I", take(4))[0]
    config = config_from_text(take(cfg_len).decode())
    n_params = struct.unpack("<I", take(4))[0]
    arrays: dict[str, Array] = {}
    for _ in range(n_params):
        name_len = struct.unpack("<H", take(2))[0]
        name = take(name_len).decode()
        ndim = struct.unpack("<B", take(1))[0]
        shape = tuple(struct.unpack("<I", take(4))[0] for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape)
        arrays[name] = arr.astype(np.float64, copy=True)
    expected = param_shapes(config)
    if set(arrays) != set(expected):
        raise ValueError("checkpoint parameter names do not match its config")
    for name, shape in expected.items():
        if arrays[name].shape != tuple(shape):
            raise ValueError(f"checkpoint shape mismatch for {name}")
    return ModelParams(config, arrays)
