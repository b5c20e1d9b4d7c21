import math

import pytest
import torch

from fisheye_depth.errors import ContractViolation
from fisheye_depth.evaluation import MetricReport, average_reports, compute_metrics, evaluate_depth, median_scale
from fisheye_depth.geometry import DTYPE
from fisheye_depth.synthesis import DepthGrid


def gt_grid(seed=0):
    g = torch.Generator().manual_seed(seed)
    return DepthGrid.full(0.5 + 10 * torch.rand(6, 8, generator=g, dtype=DTYPE))


def test_perfect_prediction():
    gt = gt_grid()
    assert compute_metrics(gt, gt).as_tuple() == (0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0)


def test_constant_ratio():
    gt = gt_grid()
    r = compute_metrics(DepthGrid.full(1.3 * gt.depth), gt, cap=1e9)
    assert r.abs_rel == pytest.approx(0.3, abs=1e-12)
    assert r.rmse_log == pytest.approx(math.log(1.3), abs=1e-12)
    assert (r.delta1, r.delta2, r.delta3) == (0.0, 1.0, 1.0)
    # sq_rel = mean(0.09 g), rmse = 0.3 sqrt(mean g^2)
    assert r.sq_rel == pytest.approx(0.09 * float(gt.depth.mean()), rel=1e-12)
    assert r.rmse == pytest.approx(0.3 * math.sqrt(float((gt.depth**2).mean())), rel=1e-12)


def test_median_scale_examples():
    gt = gt_grid()
    assert torch.allclose(median_scale(DepthGrid.full(2 * gt.depth), gt).depth, gt.depth, rtol=1e-15)
    assert torch.equal(median_scale(gt, gt).depth, gt.depth)
    g3 = DepthGrid.full(torch.tensor([[1.0, 3.0, 5.0]], dtype=DTYPE))
    out = median_scale(DepthGrid.full(torch.ones(1, 3, dtype=DTYPE)), g3)
    assert out.depth.tolist() == [[3.0, 3.0, 3.0]]


def test_invalid_and_cap():
    gt = DepthGrid(torch.tensor([[1.0, 50.0, 2.0]], dtype=DTYPE), torch.tensor([[True, True, False]]))
    pred = DepthGrid.full(torch.tensor([[1.0, 20.0, 9.0]], dtype=DTYPE))
    r = compute_metrics(pred, gt)
    # the far pixel is capped to 20 on both sides; the invalid one is ignored
    assert r.n_pixels == 2 and r.abs_rel == 0.0
    with pytest.raises(ContractViolation):
        compute_metrics(pred, DepthGrid(gt.depth, torch.zeros(1, 3, dtype=torch.bool)))


def test_scale_invariance_of_median_scaled_metrics():
    gt = gt_grid(1)
    pred = gt_grid(2)
    ref = evaluate_depth(pred, gt).as_tuple()
    for c in (0.01, 0.5, 3.0, 1e3):
        got = evaluate_depth(DepthGrid.full(c * pred.depth), gt).as_tuple()
        assert got == pytest.approx(ref, rel=1e-12, abs=1e-15)


def test_average_reports():
    a = MetricReport(0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 10, True)
    b = MetricReport(0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 30, True)
    m = average_reports([a, b])
    assert m.as_tuple() == pytest.approx((0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8))
    assert m.n_pixels == 40 and m.median_scaled
    with pytest.raises(ContractViolation):
        average_reports([])


def test_deltas_ordered():
    r = evaluate_depth(gt_grid(3), gt_grid(4))
    assert 0 <= r.delta1 <= r.delta2 <= r.delta3 <= 1
    assert min(r.abs_rel, r.sq_rel, r.rmse, r.rmse_log) >= 0
    assert '"abs_rel"' in r.to_json()
