"""The finite-difference verification suite behind `hnet gradcheck`.

Every differentiable operation, each attention block variant, the unrolled
transport retrieval, and the tiny end-to-end model + loss are checked
against central differences.  Inputs for kinked ops (ReLU, |x|, bilinear
resampling) are drawn away from their kinks so the differences stay
one-sided.
"""

from __future__ import annotations

import dataclasses
import itertools

import numpy as np

from . import attention as att
from . import losses as lss
from . import model as mdl
from . import ot
from . import tensor as t

GRADCHECK_TOL = 1e-4


@dataclasses.dataclass
class CheckResult:
    name: str
    error: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.error < self.tol


def _away_from_zero(rng, shape, margin=0.2):
    return (rng.random(shape) + margin) * np.sign(rng.standard_normal(shape))


def _op_cases():
    """(name, DiffOp, input generator) for the elementary operations."""
    cases = [
        ("batched_matmul", t.DiffOp("batched_matmul", t.batched_matmul,
                                    t.batched_matmul_vjp),
         lambda r: (r.standard_normal((2, 3, 4)), r.standard_normal((2, 4, 5)))),
        ("softmax_lastdim", t.DiffOp("softmax_lastdim", t.softmax_lastdim,
                                     lambda x, gy: (t.softmax_lastdim_vjp(x, gy),)),
         lambda r: (r.standard_normal((3, 5)),)),
        ("conv1x1", t.DiffOp("conv1x1", t.conv1x1,
                             lambda x, w, b, gy: t.conv1x1_vjp(x, w, b, gy)),
         lambda r: (r.standard_normal((3, 2, 4)), r.standard_normal((2, 3)),
                    r.standard_normal(2))),
        ("normalize_euclidean",
         t.DiffOp("normalize_euclidean", lambda x: t.normalize(x, 0, "euclidean"),
                  lambda x, gy: (t.normalize_vjp(x, 0, "euclidean", gy),)),
         lambda r: (r.standard_normal((4, 3)) + 0.1,)),
        ("normalize_l1",
         t.DiffOp("normalize_l1", lambda x: t.normalize(x, 1, "l1"),
                  lambda x, gy: (t.normalize_vjp(x, 1, "l1", gy),)),
         lambda r: (r.random((3, 4)) + 0.2,)),
        ("relu", t.DiffOp("relu", t.relu, lambda x, gy: (t.relu_vjp(x, gy),)),
         lambda r: (_away_from_zero(r, (3, 4)),)),
        ("sigmoid", t.DiffOp("sigmoid", t.sigmoid,
                             lambda x, gy: (t.sigmoid_vjp(x, gy),)),
         lambda r: (r.standard_normal((2, 5)),)),
        ("exp", t.DiffOp("exp", t.exp, lambda x, gy: (t.exp_vjp(x, gy),)),
         lambda r: (r.standard_normal((2, 3)),)),
        ("add", t.DiffOp("add", t.add, lambda x, y, gy: t.add_vjp(x, y, gy)),
         lambda r: (r.standard_normal((2, 3)), r.standard_normal((2, 3)))),
        ("mul", t.DiffOp("mul", t.mul, lambda x, y, gy: t.mul_vjp(x, y, gy)),
         lambda r: (r.standard_normal((2, 3)), r.standard_normal((2, 3)))),
        ("abs", t.DiffOp("abs", t.absval, lambda x, gy: (t.absval_vjp(x, gy),)),
         lambda r: (_away_from_zero(r, (3, 4)),)),
        ("mean", t.DiffOp("mean", t.mean, lambda x, gy: (t.mean_vjp(x, gy),)),
         lambda r: (r.standard_normal((3, 4)),)),
        ("upsample_bilinear", t.DiffOp(
            "upsample_bilinear", lambda x: t.upsample_bilinear(x, 2),
            lambda x, gy: (t.upsample_bilinear_vjp(x, 2, gy),)),
         lambda r: (r.standard_normal((2, 3, 4)),)),
        ("conv2d_stride1", t.DiffOp(
            "conv2d_stride1", lambda x, w, b: t.conv2d(x, w, b, 1, 1),
            lambda x, w, b, gy: t.conv2d_vjp(x, w, b, gy, 1, 1)),
         lambda r: (r.standard_normal((2, 4, 5)), r.standard_normal((3, 2, 3, 3)),
                    r.standard_normal(3))),
        ("conv2d_stride2", t.DiffOp(
            "conv2d_stride2", lambda x, w, b: t.conv2d(x, w, b, 2, 1),
            lambda x, w, b, gy: t.conv2d_vjp(x, w, b, gy, 2, 1)),
         lambda r: (r.standard_normal((2, 4, 6)), r.standard_normal((3, 2, 3, 3)),
                    r.standard_normal(3))),
        ("box3_mean", t.DiffOp("box3_mean", t.box3_mean,
                               lambda x, gy: (t.box3_mean_vjp(x, gy),)),
         lambda r: (r.standard_normal((2, 4, 5)),)),
        ("sigmoid_to_depth", t.DiffOp(
            "sigmoid_to_depth", mdl.sigmoid_to_depth,
            lambda x, gy: (mdl.sigmoid_to_depth_d(x)[1](gy),)),
         lambda r: (r.uniform(0.05, 0.95, (2, 3)),)),
        ("depth_to_disparity", t.DiffOp(
            "depth_to_disparity", lambda d: mdl.depth_to_disparity(d, 20.0, 0.05),
            lambda d, gy: (mdl.depth_to_disparity_d(d, 20.0, 0.05)[1](gy),)),
         lambda r: (r.uniform(0.2, 5.0, (2, 3)),)),
        ("ssim", t.DiffOp(
            "ssim", lambda a, b: lss.ssim(a, b, lss.LossConfig()),
            lambda a, b, gy: lss.ssim_d(a, b, lss.LossConfig())[1](gy)),
         lambda r: (r.random((2, 4, 5)), r.random((2, 4, 5)))),
        ("photometric_loss", t.DiffOp(
            "photometric_loss",
            lambda a, b: np.asarray(lss.photometric_loss(a, b, lss.LossConfig())),
            lambda a, b, gy: lss.photometric_loss_d(a, b, lss.LossConfig())[1](float(gy))),
         lambda r: (r.random((3, 4, 5)), r.random((3, 4, 5)))),
    ]
    for direction in lss.WARP_DIRECTIONS:
        cases.append((f"warp_{direction}", t.DiffOp(
            f"warp_{direction}",
            lambda s, d, _dir=direction: lss.warp(s, d, _dir),
            lambda s, d, gy, _dir=direction: lss.warp_d(s, d, _dir)[1](gy)),
            lambda r: (r.random((3, 3, 6)),
                       r.integers(0, 2, size=(1, 3, 6))
                       + r.uniform(0.2, 0.8, (1, 3, 6)))))
    return cases


def _smoothness_case():
    img = t.make_rng(77).random((3, 4, 5))
    op = t.DiffOp(
        "smoothness_loss",
        lambda d: np.asarray(lss.smoothness_loss(d, img)),
        lambda d, gy: (lss.smoothness_loss_d(d, img)[1](float(gy)),))
    return op, lambda r: (r.random((1, 4, 5)) + 0.5,)


def _eg_retrieve_case():
    def fwd(x1, x2, qw, qb, kw, kb):
        p = att.AttentionParams("eg-mea", ot.Conv1x1Params(np.eye(x1.shape[1]),
                                                           np.zeros(x1.shape[1])),
                                conv_q=ot.Conv1x1Params(qw, qb),
                                conv_k=ot.Conv1x1Params(kw, kb))
        return att.eg_retrieve(x1, x2, p)

    def vjp(x1, x2, qw, qb, kw, kb, gy):
        p = att.AttentionParams("eg-mea", ot.Conv1x1Params(np.eye(x1.shape[1]),
                                                           np.zeros(x1.shape[1])),
                                conv_q=ot.Conv1x1Params(qw, qb),
                                conv_k=ot.Conv1x1Params(kw, kb))
        _, f = att._eg_retrieve_d(x1, x2, p)
        g1, g2, gp = f(gy)
        return g1, g2, gp["conv_q.w"], gp["conv_q.b"], gp["conv_k.w"], gp["conv_k.b"]

    gen = lambda r: (r.standard_normal((2, 3, 4)), r.standard_normal((2, 3, 4)),
                     r.standard_normal((3, 3)) * 0.5, r.standard_normal(3) * 0.2,
                     r.standard_normal((3, 3)) * 0.5, r.standard_normal(3) * 0.2)
    return t.DiffOp("eg_retrieve", fwd, vjp), gen


def _ot_retrieve_case():
    cfg = ot.SinkhornConfig(epsilon=0.05, max_iters=50, tol=0.0)

    def pack(arrs):
        return ot.RetrievalParams(ot.Conv1x1Params(arrs[0], arrs[1]),
                                  ot.Conv1x1Params(arrs[2], arrs[3]),
                                  ot.Conv1x1Params(arrs[4], arrs[5]),
                                  ot.Conv1x1Params(arrs[6], arrs[7]))

    def fwd(x1, x2, *arrs):
        return ot.ot_retrieve(x1, x2, pack(arrs), cfg).values

    def vjp(x1, x2, *arrs_gy):
        arrs, gy = arrs_gy[:-1], arrs_gy[-1]
        _, f = ot.ot_retrieve_d(x1, x2, pack(arrs), cfg)
        gx1, gx2, gr = f(gy)
        return (gx1, gx2, gr["conv_sim_1.w"], gr["conv_sim_1.b"],
                gr["conv_sim_2.w"], gr["conv_sim_2.b"],
                gr["conv_mass_1.w"], gr["conv_mass_1.b"],
                gr["conv_mass_2.w"], gr["conv_mass_2.b"])

    def gen_inputs(start):
        c, h, w = 4, 1, 4
        for s in itertools.count(start):
            rng = t.make_rng(31000 + s)
            x1 = rng.standard_normal((h, c, w))
            x2 = rng.standard_normal((h, c, w))
            arrs = [rng.standard_normal((c, c)) * 0.6, rng.standard_normal(c) * 0.2,
                    rng.standard_normal((c, c)) * 0.6, rng.standard_normal(c) * 0.2,
                    rng.standard_normal((1, c)) * 0.6, rng.standard_normal(1) * 0.2,
                    rng.standard_normal((1, c)) * 0.6, rng.standard_normal(1) * 0.2]
            z1 = np.einsum("oc,hcw->how", arrs[4], x1) + arrs[5][None, :, None]
            z2 = np.einsum("oc,hcw->how", arrs[6], x2) + arrs[7][None, :, None]
            if min(np.abs(z1).min(), np.abs(z2).min()) > 1e-3:
                return [x1, x2] + arrs

    return t.DiffOp("ot_retrieve_unrolled", fwd, vjp), gen_inputs


def _attention_block_case(mode):
    cfg = ot.SinkhornConfig(epsilon=0.1, max_iters=30, tol=0.0)
    c = 3
    shapes = att.param_shapes(c, mode)
    names = sorted(shapes)

    def pack(arrs):
        return att.params_from_dict(mode, dict(zip(names, arrs)))

    def fwd(xl, xr, *arrs):
        ol, orr = att.attention_block(xl, xr, pack(arrs), cfg)
        return np.stack([ol, orr])

    def vjp(xl, xr, *arrs_gy):
        arrs, gy = arrs_gy[:-1], arrs_gy[-1]
        _, _, f = att.attention_block_d(xl, xr, pack(arrs), cfg)
        gxl, gxr, gp = f(gy[0], gy[1])
        return (gxl, gxr) + tuple(gp[n] for n in names)

    def gen_inputs(start):
        h, w = 2, 4
        for s in itertools.count(start):
            rng = t.make_rng(43000 + s)
            xl = rng.standard_normal((c, h, w))
            xr = rng.standard_normal((c, h, w))
            arrs = [rng.standard_normal(shapes[n]) * 0.5 for n in names]
            if mode.startswith("eg"):
                return [xl, xr] + arrs
            d = dict(zip(names, arrs))
            ok = True
            for key, x in (("conv_mass_1", xl), ("conv_mass_2", xr)):
                rows = x.reshape(1, c, h * w) if mode.endswith("mnl") else \
                    np.ascontiguousarray(np.transpose(x, (1, 0, 2)))
                z = np.einsum("oc,hcw->how", d[key + ".w"], rows) \
                    + d[key + ".b"][None, :, None]
                if np.abs(z).min() <= 2e-3:
                    ok = False
            if ok:
                return [xl, xr] + arrs

    return t.DiffOp(f"attention_block_{mode}", fwd, vjp), gen_inputs


def _end_to_end_case():
    config = mdl.ModelConfig(height=8, width=16, widths=(4, 8), scales=2,
                             attention="off")
    camera = mdl.Camera(focal=20.0, baseline=0.05)
    loss_cfg = lss.LossConfig(scales=2)
    rng = t.make_rng(7)
    il = rng.uniform(0.15, 0.85, (3, 8, 16))
    ir = rng.uniform(0.15, 0.85, (3, 8, 16))
    names = sorted(mdl.param_shapes(config))

    def fwd(*arrs):
        params = mdl.ModelParams(config, dict(zip(names, arrs)))
        sl, sr = mdl.forward(il, ir, params)
        return np.asarray(lss.total_loss(sl, sr, il, ir, camera, loss_cfg).total)

    def vjp(*arrs_gy):
        arrs, gy = arrs_gy[:-1], arrs_gy[-1]
        params = mdl.ModelParams(config, dict(zip(names, arrs)))
        sl, sr, f = mdl.forward_d(il, ir, params)
        _, loss_vjp = lss.total_loss_d(sl, sr, il, ir, camera, loss_cfg)
        g_sl, g_sr = loss_vjp(float(gy))
        grads = mdl.GradDict()
        f(g_sl, g_sr, grads)
        return tuple(grads[n] for n in names)

    params = mdl.build(config, 2024)
    inputs = [params.arrays[n] for n in names]
    return t.DiffOp("tiny_model_total_loss", fwd, vjp), inputs


def run_suite(quick: bool = False, seeds: int = 10) -> list[CheckResult]:
    """Run every check; ``quick`` samples the end-to-end sweep instead of
    probing all parameters."""
    results = []
    for name, op, gen in _op_cases():
        worst = 0.0
        for seed in range(seeds):
            rng_in = t.make_rng(100 + seed)
            worst = max(worst, t.gradcheck(op, gen(rng_in), step=1e-5,
                                           rng=t.make_rng(seed)))
        results.append(CheckResult(name, worst, GRADCHECK_TOL))

    op, gen = _smoothness_case()
    worst = max(t.gradcheck(op, gen(t.make_rng(200 + s)), rng=t.make_rng(s))
                for s in range(seeds))
    results.append(CheckResult("smoothness_loss", worst, GRADCHECK_TOL))

    op, gen = _eg_retrieve_case()
    worst = max(t.gradcheck(op, gen(t.make_rng(300 + s)), rng=t.make_rng(s))
                for s in range(seeds))
    results.append(CheckResult("eg_retrieve", worst, GRADCHECK_TOL))

    op, gen_inputs = _ot_retrieve_case()
    worst = max(t.gradcheck(op, gen_inputs(37 * s), rng=t.make_rng(s))
                for s in range(3))
    results.append(CheckResult("ot_retrieve_unrolled", worst, GRADCHECK_TOL))

    for mode in att.MODES:
        op, gen_inputs = _attention_block_case(mode)
        err = t.gradcheck(op, gen_inputs(17), rng=t.make_rng(1))
        results.append(CheckResult(f"attention_block_{mode}", err, GRADCHECK_TOL))

    op, inputs = _end_to_end_case()
    err = t.gradcheck(op, inputs, rng=t.make_rng(0),
                      sample=(8 if quick else None))
    results.append(CheckResult("tiny_model_total_loss", err, GRADCHECK_TOL))
    return results
