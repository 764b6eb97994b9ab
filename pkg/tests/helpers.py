"""Shared test harness pieces: DiffOp wrappers around full-model pipelines."""

import numpy as np

from hnet import losses as lss
from hnet import model as mdl
from hnet import tensor as t


def images_for(config, seed, lo=0.15, hi=0.85):
    """Image pair inside [0,1] with margin so FD perturbations stay legal."""
    rng = t.make_rng(seed)
    il = rng.uniform(lo, hi, size=(3, config.height, config.width))
    ir = rng.uniform(lo, hi, size=(3, config.height, config.width))
    return il, ir


def model_depth_diffop(config):
    """DiffOp over (il, ir, *params) -> concatenated depth maps of all scales."""
    names = sorted(mdl.param_shapes(config))

    def fwd(il, ir, *arrs):
        params = mdl.ModelParams(config, dict(zip(names, arrs)))
        sl, sr = mdl.forward(il, ir, params)
        return np.concatenate([mdl.sigmoid_to_depth(o).ravel() for o in sl + sr])

    def vjp(il, ir, *arrs_gy):
        arrs, gy = arrs_gy[:-1], arrs_gy[-1]
        params = mdl.ModelParams(config, dict(zip(names, arrs)))
        sl, sr, f = mdl.forward_d(il, ir, params)
        gsig = []
        off = 0
        for o in sl + sr:
            _, dv = mdl.sigmoid_to_depth_d(o)
            g = gy[off:off + o.size].reshape(o.shape)
            off += o.size
            gsig.append(dv(g))
        m = config.scales
        grads = mdl.GradDict()
        gil, gir = f(gsig[:m], gsig[m:], grads)
        return (gil, gir) + tuple(grads[n] for n in names)

    return t.DiffOp("model+depth", fwd, vjp), names


def model_loss_diffop(config, camera, loss_cfg, il, ir):
    """DiffOp over (*params) -> scalar training loss at fixed images."""
    names = sorted(mdl.param_shapes(config))

    def fwd(*arrs):
        params = mdl.ModelParams(config, dict(zip(names, arrs)))
        sl, sr = mdl.forward(il, ir, params)
        report = lss.total_loss(sl, sr, il, ir, camera, loss_cfg)
        return np.asarray(report.total)

    def vjp(*arrs_gy):
        arrs, gy = arrs_gy[:-1], arrs_gy[-1]
        params = mdl.ModelParams(config, dict(zip(names, arrs)))
        sl, sr, f = mdl.forward_d(il, ir, params)
        report, loss_vjp = lss.total_loss_d(sl, sr, il, ir, camera, loss_cfg)
        g_sl, g_sr = loss_vjp(float(gy))
        grads = mdl.GradDict()
        f(g_sl, g_sr, grads)
        return tuple(grads[n] for n in names)

    return t.DiffOp("model+total_loss", fwd, vjp), names


def build_arrays(config, seed):
    params = mdl.build(config, seed)
    names = sorted(params.arrays)
    return params, [params.arrays[n] for n in names]
