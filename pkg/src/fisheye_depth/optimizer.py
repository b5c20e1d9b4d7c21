"""Direct first-order recovery of a depth map from one fisheye snippet.

Instead of training a network, the per-pixel logits of a depth pyramid (and
optionally the two relative poses) are optimized against the total loss.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import torch

from . import kinks
from .depth_param import compose_residual, depth_to_logits, level_shape, logits_to_depth_pyramid, zero_pyramid
from .errors import ContractViolation, DivergenceError
from .geometry import DTYPE, FisheyeIntrinsics, RigidPose, as_tensor, se3_exp
from .losses import DecaySchedule, Frames, LossConfig, LossReport, total_loss
from .synthesis import DepthGrid

log = logging.getLogger(__name__)


@dataclass
class DepthProblem:
    target: torch.Tensor
    sources: Sequence[torch.Tensor]
    poses: Sequence[RigidPose]
    intr: FisheyeIntrinsics
    cfg: LossConfig = field(default_factory=LossConfig)
    sched: DecaySchedule = field(default_factory=DecaySchedule)
    teacher: DepthGrid | None = None

    def __post_init__(self):
        if len(self.sources) != 2 or len(self.poses) != 2:
            raise ContractViolation("a snippet has exactly two source frames and two poses")
        self.frames = Frames(self.target, self.sources, self.poses, self.intr, self.cfg)
        if self.teacher is not None and self.teacher.shape != self.frames.target.shape:
            raise ContractViolation("teacher map does not match the frame size")

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.frames.target.shape)

    @property
    def depth_valid(self) -> torch.Tensor:
        return self.frames.depth_valid


@dataclass(frozen=True)
class OptimizeConfig:
    iterations: int = 2000
    step_size: float = 0.05
    adaptive: bool = True
    pose_refinement: bool = False
    seed: int = 0
    # initial depth of every pixel; None starts from zero logits (about 0.2 units)
    init_depth: float | None = None
    init_noise: float = 0.0
    # "residual": level l = own logits + upsampled level l + 1; "independent": levels decoupled
    coupling: str = "residual"
    # Adam denominator floor; large values damp pixels whose gradient is tiny
    adam_eps: float = 1e-8
    # "constant" or "cosine" (step size annealed to 0 over the run)
    schedule: str = "constant"

    def __post_init__(self):
        if self.iterations < 1:
            raise ContractViolation("iterations must be >= 1")
        if not self.step_size > 0:
            raise ContractViolation("step_size must be positive")
        if self.coupling not in ("residual", "independent"):
            raise ContractViolation(f"unknown coupling {self.coupling!r}")
        if self.schedule not in ("constant", "cosine"):
            raise ContractViolation(f"unknown step-size schedule {self.schedule!r}")
        if not self.adam_eps > 0:
            raise ContractViolation("adam_eps must be positive")


@dataclass
class OptTrace:
    reports: list[LossReport]
    depth: DepthGrid
    poses: list[RigidPose]
    logits: list[torch.Tensor] = field(default_factory=list, repr=False)

    def to_jsonl(self) -> str:
        return "".join(r.to_json() + "\n" for r in self.reports)


def _poses(problem: DepthProblem, increments: torch.Tensor | None) -> list[RigidPose]:
    if increments is None:
        return list(problem.poses)
    return [se3_exp(increments[i]).compose(RigidPose(p.rotation, p.translation, check=False))
            for i, p in enumerate(problem.poses)]


def evaluate(problem: DepthProblem, logits: Sequence[torch.Tensor], increments: torch.Tensor | None = None,
             steps: int = 0, keep_maps: bool = False):
    """Total loss for a logit pyramid; returns ``(total tensor, report)``."""
    cfg = problem.cfg
    depths = logits_to_depth_pyramid(logits, cfg.d_min, cfg.d_max, full_shape=problem.shape)
    return total_loss(problem.frames, depths, problem.teacher, cfg, problem.sched, steps,
                      poses=_poses(problem, increments), keep_maps=keep_maps)


def loss_and_gradient(problem: DepthProblem, logits: Sequence[torch.Tensor], pose_refinement: bool = False,
                      steps: int = 0):
    """Loss report, gradient per logit level and (optionally) ``2 x 6`` pose-increment gradient."""
    leaves = [as_tensor(g).detach().clone().requires_grad_(True) for g in logits]
    inc = torch.zeros((2, 6), dtype=DTYPE, requires_grad=True) if pose_refinement else None
    total, report = evaluate(problem, leaves, inc, steps)
    wrt = leaves + ([inc] if inc is not None else [])
    grads = torch.autograd.grad(total, wrt, allow_unused=True)
    grads = [torch.zeros_like(w) if g is None else g for g, w in zip(grads, wrt)]
    return report, grads[: len(leaves)], (grads[-1] if inc is not None else None)


def initial_logits(problem: DepthProblem, cfg: OptimizeConfig) -> list[torch.Tensor]:
    h, w = problem.shape
    params = zero_pyramid(h, w, problem.cfg.scales)
    if cfg.init_depth is not None:
        base = float(depth_to_logits(torch.tensor(cfg.init_depth), problem.cfg.d_min, problem.cfg.d_max))
        if cfg.coupling == "residual":
            params[-1] = params[-1] + base
        else:
            params = [p + base for p in params]
    if cfg.init_noise > 0:
        g = torch.Generator().manual_seed(cfg.seed)
        params = [p + cfg.init_noise * torch.randn(p.shape, generator=g, dtype=DTYPE) for p in params]
    return params


def optimize(problem: DepthProblem, cfg: OptimizeConfig = OptimizeConfig()) -> OptTrace:
    torch.manual_seed(cfg.seed)
    params = [p.clone().requires_grad_(True) for p in initial_logits(problem, cfg)]
    inc = torch.zeros((2, 6), dtype=DTYPE, requires_grad=True) if cfg.pose_refinement else None
    leaves = params + ([inc] if inc is not None else [])
    opt = (torch.optim.Adam(leaves, lr=cfg.step_size, eps=cfg.adam_eps) if cfg.adaptive
           else torch.optim.SGD(leaves, lr=cfg.step_size))
    sched = (torch.optim.lr_scheduler.CosineAnnealingLR(opt, cfg.iterations) if cfg.schedule == "cosine"
             else None)
    compose = compose_residual if cfg.coupling == "residual" else list
    reports = []
    for it in range(cfg.iterations):
        opt.zero_grad()
        total, report = evaluate(problem, compose(params), inc, steps=it)
        if not math.isfinite(report.total):
            raise DivergenceError(f"non-finite loss at iteration {it}: {report.to_json()}")
        total.backward()
        opt.step()
        if sched is not None:
            sched.step()
        reports.append(report)
        if it % 200 == 0:
            log.debug("iter %d %s", it, report.to_json())
    with torch.no_grad():
        logits = [g.detach().clone() for g in compose(params)]
        depth = logits_to_depth_pyramid(logits[:1], problem.cfg.d_min, problem.cfg.d_max, problem.shape)[0]
        poses = [RigidPose(p.rotation.detach(), p.translation.detach()) for p in _poses(problem, inc)]
    return OptTrace(reports, DepthGrid(depth, problem.depth_valid.clone()), poses, logits)


@dataclass
class GradcheckReport:
    max_rel_error: float
    mean_rel_error: float
    checked: int
    excluded: int
    max_abs_grad: float
    samples: list = field(default_factory=list, repr=False)

    def to_json(self) -> str:
        import json

        return json.dumps({"max_rel_error": self.max_rel_error, "mean_rel_error": self.mean_rel_error,
                           "checked": self.checked, "excluded": self.excluded,
                           "max_abs_grad": self.max_abs_grad})


def _loss_value(problem, logits, steps):
    with torch.no_grad(), kinks.recording() as rec:
        total, _ = evaluate(problem, logits, steps=steps)
    return float(total), rec


def gradcheck(problem: DepthProblem, logits: Sequence[torch.Tensor], samples: int = 200, seed: int = 0,
              h: float = 1e-4, steps: int = 0, grad_floor: float = 1e-8) -> GradcheckReport:
    """Compare analytic logit gradients with central differences on random coordinates.

    A coordinate is excluded when the perturbation ``x +- h`` changes any
    discrete decision of the loss (bilinear cell, validity, minimum index,
    auto-mask, sign inside an absolute value, median rank); central
    differences straddle a kink there. Coordinates where both gradients are
    below ``grad_floor`` count as agreeing.
    """
    if samples < 1:
        raise ContractViolation("samples must be >= 1")
    logits = [as_tensor(g).detach().clone() for g in logits]
    _, grads, _ = loss_and_gradient(problem, logits, steps=steps)
    _, base = _loss_value(problem, logits, steps)
    sizes = [g.numel() for g in logits]
    g = torch.Generator().manual_seed(seed)
    n = sum(sizes)
    if samples <= n:
        picks = torch.randperm(n, generator=g)[:samples].tolist()
    else:
        picks = torch.randint(0, n, (samples,), generator=g).tolist()
    errors, excluded, rows = [], 0, []
    for flat in picks:
        level = 0
        while flat >= sizes[level]:
            flat -= sizes[level]
            level += 1
        vals = []
        recs = []
        for sign in (1, -1):
            pert = [x.clone() for x in logits]
            pert[level].view(-1)[flat] += sign * h
            v, rec = _loss_value(problem, pert, steps)
            vals.append(v)
            recs.append(rec)
        fd = (vals[0] - vals[1]) / (2 * h)
        an = float(grads[level].reshape(-1)[flat])
        if not (kinks.same(recs[0], base) and kinks.same(recs[1], base)):
            excluded += 1
            rows.append((level, flat, an, fd, None))
            continue
        scale = max(abs(an), abs(fd))
        rel = 0.0 if scale < grad_floor else abs(an - fd) / scale
        errors.append(rel)
        rows.append((level, flat, an, fd, rel))
    max_abs = max((abs(r[2]) for r in rows), default=0.0)
    if not errors:
        return GradcheckReport(math.nan, math.nan, 0, excluded, max_abs, rows)
    return GradcheckReport(max(errors), sum(errors) / len(errors), len(errors), excluded, max_abs, rows)


def random_problem(width: int = 16, height: int = 12, seed: int = 0, cfg: LossConfig | None = None,
                   sched: DecaySchedule = DecaySchedule(), teacher: bool = True):
    """Small problem with uniform-noise frames, random poses and a random teacher.

    Returns ``(problem, logits)`` with random logits for every pyramid level.
    """
    cfg = LossConfig() if cfg is None else cfg
    g = torch.Generator().manual_seed(seed)

    def rnd(*shape):
        return torch.rand(shape, generator=g, dtype=DTYPE)

    f = 0.6 * width
    intr = FisheyeIntrinsics(fx=f, fy=f, cx=(width - 1) / 2, cy=(height - 1) / 2,
                             k1=-0.02, k2=0.003, width=width, height=height)
    frames = [(0.2 + 0.6 * rnd(height, width)) for _ in range(3)]
    poses = [RigidPose.from_rotvec(0.02 * (rnd(3) - 0.5), 0.1 * (rnd(3) - 0.5)) for _ in range(2)]
    tdepth = DepthGrid.full(0.5 + 3 * rnd(height, width)) if teacher else None
    problem = DepthProblem(frames[1], [frames[0], frames[2]], poses, intr, cfg, sched, tdepth)
    logits = []
    for l in range(cfg.scales):
        logits.append(-3.0 + 0.5 * torch.randn(level_shape(height, width, l), generator=g, dtype=DTYPE))
    return problem, logits
