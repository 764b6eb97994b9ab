"""Depth evaluation metrics over pixels with ground truth inside the range cap."""

from __future__ import annotations

import dataclasses

import numpy as np

from .tensor import Array

CSV_HEADER = "abs_rel,sq_rel,rmse,rmse_log,d1,d2,d3,n_valid"


@dataclasses.dataclass(frozen=True)
class MetricsReport:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    delta1: float
    delta2: float
    delta3: float
    n_valid: int

    def __post_init__(self):
        if not (self.delta1 <= self.delta2 <= self.delta3):
            raise ValueError("delta fractions must be nondecreasing")


def compute_metrics(pred: Array, gt: Array, cap: float = 80.0) -> MetricsReport:
    """Standard depth errors over pixels with 0 < gt <= cap.

    No median scaling is applied: stereo supervision fixes the metric scale.
    The delta thresholds use strict inequality, so an exact ratio of 1.25
    does not count toward delta1.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    mask = (gt > 0) & (gt <= cap)
    n_valid = int(mask.sum())
    if n_valid == 0:
        raise ValueError("no valid pixels under the range cap")
    p = pred[mask]
    g = gt[mask]
    if np.any(p <= 0):
        raise ValueError("prediction must be positive on valid pixels")
    ratio = np.maximum(p / g, g / p)
    err = p - g
    return MetricsReport(
        abs_rel=float(np.mean(np.abs(err) / g)),
        sq_rel=float(np.mean(err * err / g)),
        rmse=float(np.sqrt(np.mean(err * err))),
        rmse_log=float(np.sqrt(np.mean((np.log(p) - np.log(g)) ** 2))),
        delta1=float(np.mean(ratio < 1.25)),
        delta2=float(np.mean(ratio < 1.25 ** 2)),
        delta3=float(np.mean(ratio < 1.25 ** 3)),
        n_valid=n_valid,
    )


def csv_row(report: MetricsReport) -> str:
    vals = [report.abs_rel, report.sq_rel, report.rmse, report.rmse_log,
            report.delta1, report.delta2, report.delta3]
    return ",".join(f"{v:.6f}" for v in vals) + f",{report.n_valid}"
