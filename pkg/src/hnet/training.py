"""Deterministic training on synthetic scenes, plus inference and evaluation.

Single-sample steps over a fixed scene list in a fixed order; the optimizer
is the usual adaptive-moment scheme with bias correction, and the learning
rate drops by a fixed factor late in the run.  Runs with equal configs and
seeds produce identical loss logs and checkpoints.
"""

from __future__ import annotations

import dataclasses
import os

import numpy as np

from . import fileio
from . import losses as lss
from . import metrics as mt
from . import model as mdl
from . import scenes as sc
from .ot import NumericalError, SinkhornConfig
from .tensor import Array

LOSS_LOG_HEADER = "step,photometric,smoothness,total,lr"


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    steps: int
    model: mdl.ModelConfig
    scene: sc.SceneConfig
    loss: lss.LossConfig = dataclasses.field(default_factory=lss.LossConfig)
    scene_seeds: tuple[int, ...] = (0,)
    lr: float = 1e-4
    lr_drop_frac: float = 0.75
    lr_drop_factor: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not self.scene_seeds:
            raise ValueError("need at least one scene seed")
        if self.model.scales != self.loss.scales:
            raise ValueError("model.scales and loss.scales must agree")
        if (self.model.height, self.model.width) != (self.scene.height,
                                                     self.scene.width):
            raise ValueError("model and scene sizes must agree")


@dataclasses.dataclass
class TrainResult:
    params: mdl.ModelParams
    log: list  # (step, photometric, smoothness, total, lr)
    aborted_at: int | None = None


def learning_rate(cfg: TrainConfig, step: int) -> float:
    if step >= int(cfg.lr_drop_frac * cfg.steps):
        return cfg.lr * cfg.lr_drop_factor
    return cfg.lr


def train(cfg: TrainConfig, out_dir: str | None = None) -> TrainResult:
    """Optimize the model on the configured scenes.

    Writes `checkpoint.hnet` and `loss_log.csv` into ``out_dir`` when given.
    A non-finite loss aborts with the step index; the last parameters that
    produced a finite loss are kept (and written, if an out_dir is set).
    """
    params = mdl.build(cfg.model, cfg.seed)
    samples = [sc.generate_scene(cfg.scene, s) for s in cfg.scene_seeds]
    camera = cfg.scene.camera
    names = params.names()
    m_state = {n: np.zeros_like(params.arrays[n]) for n in names}
    v_state = {n: np.zeros_like(params.arrays[n]) for n in names}

    log = []
    snapshot = params.copy()
    for step in range(cfg.steps):
        sample = samples[step % len(samples)]
        sig_l, sig_r, net_vjp = mdl.forward_d(sample.il, sample.ir, params)
        report, loss_vjp = lss.total_loss_d(sig_l, sig_r, sample.il, sample.ir,
                                            camera, cfg.loss)
        lr = learning_rate(cfg, step)
        if not np.isfinite(report.total):
            result = TrainResult(snapshot, log, aborted_at=step)
            if out_dir is not None:
                _write_outputs(out_dir, cfg, result)
            raise NumericalError(
                f"non-finite loss at step {step}; last finite checkpoint kept")
        log.append((step, report.photometric_total, report.smoothness_total,
                    report.total, lr))
        snapshot = params.copy()

        grads = mdl.GradDict()
        g_l, g_r = loss_vjp(1.0)
        net_vjp(g_l, g_r, grads)
        tick = step + 1
        bc1 = 1.0 - cfg.beta1 ** tick
        bc2 = 1.0 - cfg.beta2 ** tick
        for n in names:
            g = grads.get(n)
            if g is None:
                continue
            m_state[n] = cfg.beta1 * m_state[n] + (1.0 - cfg.beta1) * g
            v_state[n] = cfg.beta2 * v_state[n] + (1.0 - cfg.beta2) * g * g
            step_dir = (m_state[n] / bc1) / (np.sqrt(v_state[n] / bc2) + cfg.adam_eps)
            params.arrays[n] = params.arrays[n] - lr * step_dir

    result = TrainResult(params, log)
    if out_dir is not None:
        _write_outputs(out_dir, cfg, result)
    return result


def _write_outputs(out_dir: str, cfg: TrainConfig, result: TrainResult) -> None:
    fileio.ensure_dir(out_dir)
    mdl.save_checkpoint(os.path.join(out_dir, "checkpoint.hnet"), result.params)
    write_loss_log(os.path.join(out_dir, "loss_log.csv"), result.log)
    with open(os.path.join(out_dir, "train.cfg"), "w") as f:
        f.write(train_config_to_text(cfg))


def write_loss_log(path: str, log) -> None:
    lines = [LOSS_LOG_HEADER]
    for step, photo, smooth, total, lr in log:
        lines.append(f"{step},{photo:.12g},{smooth:.12g},{total:.12g},{lr:.12g}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def read_loss_log(path: str):
    with open(path) as f:
        lines = f.read().strip().splitlines()
    if lines[0] != LOSS_LOG_HEADER:
        raise ValueError("unexpected loss log header")
    out = []
    for line in lines[1:]:
        step, photo, smooth, total, lr = line.split(",")
        out.append((int(step), float(photo), float(smooth), float(total), float(lr)))
    return out


# ---------------------------------------------------------------------------
# inference and evaluation

@dataclasses.dataclass
class InferResult:
    depth_left: Array    # [1,h,w], finest scale
    depth_right: Array
    disparity_left: Array
    disparity_right: Array


def infer(params: mdl.ModelParams, sample: sc.StereoSample) -> InferResult:
    cfg = params.config
    if sample.il.shape != (3, cfg.height, cfg.width):
        raise ValueError(
            f"checkpoint expects {cfg.height}x{cfg.width} images, sample is "
            f"{sample.il.shape[1]}x{sample.il.shape[2]}")
    sig_l, sig_r = mdl.forward(sample.il, sample.ir, params)
    depth_l = mdl.sigmoid_to_depth(sig_l[0])
    depth_r = mdl.sigmoid_to_depth(sig_r[0])
    cam = sample.camera
    return InferResult(
        depth_left=depth_l, depth_right=depth_r,
        disparity_left=mdl.depth_to_disparity(depth_l, cam.focal, cam.baseline),
        disparity_right=mdl.depth_to_disparity(depth_r, cam.focal, cam.baseline))


def evaluate(params: mdl.ModelParams, sample: sc.StereoSample,
             cap: float = 80.0) -> mt.MetricsReport:
    """Depth metrics of the left branch against the scene's ground truth."""
    pred = infer(params, sample)
    return mt.compute_metrics(pred.depth_left, sample.gt_depth, cap=cap)


def disparity_error(params: mdl.ModelParams, sample: sc.StereoSample) -> float:
    """Mean |predicted - true| disparity over non-occluded pixels."""
    pred = infer(params, sample)
    valid = ~sample.occlusion
    diff = np.abs(pred.disparity_left[0] - sample.gt_disparity[0])
    return float(diff[valid].mean())


# ---------------------------------------------------------------------------
# config text round-trip

_TRAIN_SCHEMA = {
    "steps": int, "lr": float, "lr_drop_frac": float, "lr_drop_factor": float,
    "beta1": float, "beta2": float, "adam_eps": float, "seed": int,
    "scene_seeds": fileio.int_tuple,
    "loss.gamma": float, "loss.smooth_weight": float, "loss.scales": int,
}


def train_config_to_text(cfg: TrainConfig) -> str:
    entries = {
        "steps": cfg.steps, "lr": repr(cfg.lr),
        "lr_drop_frac": repr(cfg.lr_drop_frac),
        "lr_drop_factor": repr(cfg.lr_drop_factor),
        "beta1": repr(cfg.beta1), "beta2": repr(cfg.beta2),
        "adam_eps": repr(cfg.adam_eps), "seed": cfg.seed,
        "scene_seeds": fileio.fmt_int_tuple(cfg.scene_seeds),
        "loss.gamma": repr(cfg.loss.gamma),
        "loss.smooth_weight": repr(cfg.loss.smooth_weight),
        "loss.scales": cfg.loss.scales,
    }
    for line in mdl.config_to_text(cfg.model).splitlines():
        entries["model." + line.split(" = ")[0]] = line.split(" = ", 1)[1]
    for line in sc.scene_config_to_text(cfg.scene).splitlines():
        entries["scene." + line.split(" = ")[0]] = line.split(" = ", 1)[1]
    return fileio.dump_kv(entries)


def train_config_from_text(text: str) -> TrainConfig:
    plain, model_lines, scene_lines = [], [], []
    for line in text.splitlines():
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if stripped.startswith("model."):
            model_lines.append(stripped[len("model."):])
        elif stripped.startswith("scene."):
            scene_lines.append(stripped[len("scene."):])
        else:
            plain.append(stripped)
    kv = fileio.parse_kv("\n".join(plain), _TRAIN_SCHEMA)
    missing = set(_TRAIN_SCHEMA) - set(kv)
    if missing:
        raise ValueError(f"train config missing keys: {sorted(missing)}")
    model_cfg = mdl.config_from_text("\n".join(model_lines))
    scene_cfg = sc.scene_config_from_text("\n".join(scene_lines))
    return TrainConfig(
        steps=kv["steps"], model=model_cfg, scene=scene_cfg,
        loss=lss.LossConfig(gamma=kv["loss.gamma"],
                            smooth_weight=kv["loss.smooth_weight"],
                            scales=kv["loss.scales"]),
        scene_seeds=kv["scene_seeds"], lr=kv["lr"],
        lr_drop_frac=kv["lr_drop_frac"], lr_drop_factor=kv["lr_drop_factor"],
        beta1=kv["beta1"], beta2=kv["beta2"], adam_eps=kv["adam_eps"],
        seed=kv["seed"])
