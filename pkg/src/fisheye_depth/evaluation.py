"""Depth error metrics with median scaling and range capping."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import torch

from .errors import ContractViolation
from .synthesis import DepthGrid

EPS = 1e-3


@dataclass
class MetricReport:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    delta1: float
    delta2: float
    delta3: float
    n_pixels: int
    median_scaled: bool = False

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    def as_tuple(self):
        return (self.abs_rel, self.sq_rel, self.rmse, self.rmse_log, self.delta1, self.delta2, self.delta3)


def _eval_mask(pred: DepthGrid, gt: DepthGrid) -> torch.Tensor:
    if pred.shape != gt.shape:
        raise ContractViolation("prediction and ground truth differ in extent")
    return gt.valid & (gt.depth > 0) & pred.valid


def median_scale(pred: DepthGrid, gt: DepthGrid) -> DepthGrid:
    mask = _eval_mask(pred, gt)
    if not bool(mask.any()):
        raise ContractViolation("no pixel is valid in both prediction and ground truth")
    mp = float(torch.quantile(pred.depth[mask].detach(), 0.5))
    mg = float(torch.quantile(gt.depth[mask], 0.5))
    if mp == 0 or mg == 0:
        raise ContractViolation("zero median; cannot scale")
    return DepthGrid(pred.depth * (mg / mp), pred.valid.clone())


def compute_metrics(pred: DepthGrid, gt: DepthGrid, cap: float = 20.0, median_scaled: bool = False) -> MetricReport:
    """Standard depth metrics over pixels with positive ground truth.

    ``median_scaled`` only records whether the caller scaled ``pred``.
    """
    mask = _eval_mask(pred, gt)
    n = int(mask.sum())
    if n == 0:
        raise ContractViolation("no valid pixels to evaluate")
    p = pred.depth[mask].detach().clamp(EPS, cap)
    g = gt.depth[mask].detach().clamp(EPS, cap)
    thresh = torch.maximum(p / g, g / p)
    return MetricReport(
        abs_rel=float(((p - g).abs() / g).mean()),
        sq_rel=float(((p - g) ** 2 / g).mean()),
        rmse=math.sqrt(float(((p - g) ** 2).mean())),
        rmse_log=math.sqrt(float(((torch.log(p) - torch.log(g)) ** 2).mean())),
        delta1=float((thresh < 1.25).double().mean()),
        delta2=float((thresh < 1.25**2).double().mean()),
        delta3=float((thresh < 1.25**3).double().mean()),
        n_pixels=n,
        median_scaled=median_scaled,
    )


def evaluate_depth(pred: DepthGrid, gt: DepthGrid, cap: float = 20.0, use_median_scaling: bool = True) -> MetricReport:
    if use_median_scaling:
        pred = median_scale(pred, gt)
    return compute_metrics(pred, gt, cap, median_scaled=use_median_scaling)


def average_reports(reports: Sequence[MetricReport]) -> MetricReport:
    """Unweighted per-image mean; ``n_pixels`` is the total count."""
    if not reports:
        raise ContractViolation("no reports to average")
    k = len(reports)
    vals = [sum(r.as_tuple()[i] for r in reports) / k for i in range(7)]
    return MetricReport(*vals, n_pixels=sum(r.n_pixels for r in reports),
                        median_scaled=all(r.median_scaled for r in reports))
