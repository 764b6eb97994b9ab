import numpy as np
import pytest

from hnet import metrics as mt
from hnet import tensor as t


def test_perfect_prediction():
    gt = t.make_rng(0).uniform(1.0, 60.0, size=(1, 8, 8))
    r = mt.compute_metrics(gt.copy(), gt)
    assert (r.abs_rel, r.sq_rel, r.rmse, r.rmse_log) == (0, 0, 0, 0)
    assert (r.delta1, r.delta2, r.delta3) == (1, 1, 1)
    assert r.n_valid == 64


def test_ratio_boundary_is_strict():
    # powers of two make 1.25 * gt exact in floating point
    gt = np.array([0.5, 1.0, 2.0, 4.0, 8.0])
    r = mt.compute_metrics(1.25 * gt, gt, cap=80.0)
    assert r.abs_rel == pytest.approx(0.25, abs=1e-15)
    assert r.delta1 == 0.0
    assert r.delta2 == 1.0 and r.delta3 == 1.0


def test_cap_excludes_far_pixels():
    gt = np.array([[10.0, 50.0, 81.0, 120.0]])
    pred = np.array([[12.0, 55.0, 1.0, 1.0]])  # wild values outside the cap
    r = mt.compute_metrics(pred, gt)
    r_ref = mt.compute_metrics(pred[:, :2], gt[:, :2])
    assert r.n_valid == 2
    for field in ("abs_rel", "sq_rel", "rmse", "rmse_log", "delta1"):
        assert getattr(r, field) == getattr(r_ref, field)


def test_adding_out_of_cap_pixels_changes_nothing():
    rng = t.make_rng(1)
    gt = rng.uniform(1.0, 70.0, size=40)
    pred = gt * rng.uniform(0.8, 1.3, size=40)
    base = mt.compute_metrics(pred, gt)
    gt2 = np.concatenate([gt, [0.0, -3.0, 90.0, 300.0]])
    pred2 = np.concatenate([pred, [5.0, 5.0, 5.0, 5.0]])
    extended = mt.compute_metrics(pred2, gt2)
    assert extended == base


def test_delta_symmetry_under_swap():
    # both maps stay below the cap so the valid mask is the same either way
    rng = t.make_rng(2)
    gt = rng.uniform(1.0, 50.0, size=100)
    pred = gt * rng.uniform(0.7, 1.4, size=100)
    a = mt.compute_metrics(pred, gt)
    b = mt.compute_metrics(gt, pred)
    assert (a.delta1, a.delta2, a.delta3) == (b.delta1, b.delta2, b.delta3)
    assert a.rmse_log == pytest.approx(b.rmse_log, abs=1e-12)


def test_abs_rel_not_symmetric():
    gt = np.array([2.0, 2.0])
    pred = np.array([4.0, 4.0])
    assert mt.compute_metrics(pred, gt).abs_rel == pytest.approx(1.0)
    assert mt.compute_metrics(gt, pred).abs_rel == pytest.approx(0.5)


def test_deltas_nondecreasing():
    rng = t.make_rng(3)
    gt = rng.uniform(1.0, 70.0, size=200)
    pred = gt * np.exp(rng.standard_normal(200) * 0.4)
    r = mt.compute_metrics(pred, gt)
    assert r.delta1 <= r.delta2 <= r.delta3


def test_no_valid_pixels_rejected():
    with pytest.raises(ValueError, match="valid"):
        mt.compute_metrics(np.ones(3), np.full(3, 90.0))


def test_csv_row_shape():
    gt = np.array([1.0, 2.0])
    row = mt.csv_row(mt.compute_metrics(gt, gt))
    assert row.split(",")[-1] == "2"
    assert len(row.split(",")) == len(mt.CSV_HEADER.split(","))
