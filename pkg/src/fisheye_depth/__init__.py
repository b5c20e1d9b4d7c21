"""Self-supervised depth recovery for fisheye image triplets.

Fisheye camera geometry, cross-view synthesis, photometric and teacher
distillation losses, a direct per-pixel depth optimizer, a ray-cast oracle
renderer and depth metrics.
"""
from .errors import ContractViolation, DivergenceError, DomainError, FormatError
from .evaluation import MetricReport, compute_metrics, evaluate_depth, median_scale
from .geometry import FisheyeIntrinsics, RectifiedIntrinsics, RigidPose, project, unproject_fisheye_ray
from .losses import DecaySchedule, LossConfig, LossReport, decay_factor, total_loss
from .optimizer import DepthProblem, OptimizeConfig, OptTrace, gradcheck, optimize
from .synthesis import DepthGrid, SampleGrid, bilinear_sample, synthesize_view, synthesize_view_fisheye

__all__ = [
    "ContractViolation",
    "DecaySchedule",
    "DepthGrid",
    "DepthProblem",
    "DivergenceError",
    "DomainError",
    "FisheyeIntrinsics",
    "FormatError",
    "LossConfig",
    "LossReport",
    "MetricReport",
    "OptTrace",
    "OptimizeConfig",
    "RectifiedIntrinsics",
    "RigidPose",
    "SampleGrid",
    "bilinear_sample",
    "compute_metrics",
    "decay_factor",
    "evaluate_depth",
    "gradcheck",
    "median_scale",
    "optimize",
    "project",
    "synthesize_view",
    "synthesize_view_fisheye",
    "total_loss",
    "unproject_fisheye_ray",
]
