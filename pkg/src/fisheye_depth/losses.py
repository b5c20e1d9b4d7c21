"""Self-supervised and distillation losses and their weighting.

Every loss takes explicit validity masks and averages over valid entries
only; invalid pixels are never penalized.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import torch
import torch.nn.functional as F

from . import kinks
from .errors import ContractViolation, DomainError
from .geometry import FisheyeIntrinsics, RigidPose, as_tensor, project, rectified_intrinsics, rectified_rays
from .synthesis import (
    DepthGrid,
    FisheyeRays,
    SampleGrid,
    bilinear_sample,
    fisheye_lookup_grid,
    rectify_depth,
    synthesize_view,
    synthesize_view_fisheye,
)

C1 = 0.01**2
C2 = 0.03**2
EXP_CLAMP = 30.0


@dataclass(frozen=True)
class LossConfig:
    w_sm: float = 1e-3
    w_od: float = 1.0
    w_sd: float = 1.0
    alpha: float = 1.1
    beta: float = 0.9
    ssim_weight: float = 0.85
    scales: int = 4
    # "rectified" (pinhole intermediate grid) or "fisheye" (exact per-pixel rays)
    domain: str = "rectified"
    focal_scale: float = 0.8
    d_min: float = 0.1
    d_max: float = 100.0

    def __post_init__(self):
        if min(self.w_sm, self.w_od, self.w_sd) < 0:
            raise ContractViolation("loss weights must be nonnegative")
        if not self.beta < 1 < self.alpha:
            raise ContractViolation("ranking gap requires beta < 1 < alpha")
        if not 0 <= self.ssim_weight <= 1:
            raise ContractViolation("ssim_weight must lie in [0, 1]")
        if self.scales < 1:
            raise ContractViolation("scales must be >= 1")
        if self.domain not in ("rectified", "fisheye"):
            raise ContractViolation(f"unknown synthesis domain {self.domain!r}")
        if not 0 < self.d_min < self.d_max:
            raise ContractViolation("depth bounds require 0 < d_min < d_max")


@dataclass(frozen=True)
class DecaySchedule:
    base: float = 0.9
    period: int = 10000
    continuous: bool = False

    def __post_init__(self):
        if not 0 < self.base <= 1:
            raise ContractViolation("decay base must lie in (0, 1]")
        if self.period < 1:
            raise ContractViolation("decay period must be >= 1")


@dataclass
class LossReport:
    photometric: float
    smoothness: float
    ordinal: float
    scale_invariant: float
    total: float
    steps: int = 0
    decay: float = 1.0
    maps: dict = field(default_factory=dict, repr=False, compare=False)

    def to_json(self) -> str:
        return json.dumps({
            "ph": self.photometric, "sm": self.smoothness, "od": self.ordinal,
            "sd": self.scale_invariant, "total": self.total, "steps": self.steps, "s": self.decay,
        })

    @classmethod
    def from_json(cls, line: str) -> "LossReport":
        d = json.loads(line)
        return cls(d["ph"], d["sm"], d["od"], d["sd"], d["total"], d["steps"], d["s"])


def _check_same(a: torch.Tensor, b: torch.Tensor):
    if a.shape != b.shape:
        raise ContractViolation(f"extent mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def _masked_mean(x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    n = int(mask.sum())
    if n == 0:
        raise ContractViolation("no valid pixels")
    return torch.where(mask, x, torch.zeros_like(x)).sum() / n


def _masked_mean_hw(x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Masked mean over the last two dimensions; empty slices give 0."""
    mask = mask.expand_as(x)
    n = mask.sum(dim=(-2, -1))
    tot = torch.where(mask, x, torch.zeros_like(x)).sum(dim=(-2, -1))
    return tot / n.clamp(min=1)


def _box3(x: torch.Tensor) -> torch.Tensor:
    H, W = x.shape[-2:]
    p = F.pad(x.reshape(-1, 1, H, W), (1, 1, 1, 1), mode="reflect")
    return F.avg_pool2d(p, 3, stride=1).reshape(x.shape)


def ssim_map(a, b) -> torch.Tensor:
    """Per-pixel SSIM over 3x3 windows with reflected borders."""
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b)
    mu_a, mu_b, aa, bb, ab = _box3(torch.stack([a, b, a * a, b * b, a * b]))
    var_a = aa - mu_a**2
    var_b = bb - mu_b**2
    cov = ab - mu_a * mu_b
    num = (2 * mu_a * mu_b + C1) * (2 * cov + C2)
    den = (mu_a**2 + mu_b**2 + C1) * (var_a + var_b + C2)
    return num / den


def photometric_residual(a, b, ssim_weight: float = 0.85) -> torch.Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b)
    diff = a - b
    if kinks.active():
        kinks.note(torch.sign(diff))
    l1 = diff.abs()
    if ssim_weight == 0:
        return l1
    # rounding can push SSIM a hair above 1; keep the residual nonnegative
    dssim = ((1 - ssim_map(a, b)) / 2).clamp(0.0, 1.0)
    if kinks.active():
        kinks.note((dssim == 0) | (dssim == 1))
    return ssim_weight * dssim + (1 - ssim_weight) * l1


def min_reprojection(maps: Sequence[torch.Tensor], masks: Sequence[torch.Tensor] | None = None):
    """Masked per-pixel minimum. Returns ``(minimum, valid)``; invalid pixels hold 0."""
    if len(maps) == 0:
        raise ContractViolation("min_reprojection needs at least one map")
    maps = [as_tensor(m) for m in maps]
    if masks is None:
        masks = [torch.ones_like(m, dtype=torch.bool) for m in maps]
    for m, k in zip(maps, masks):
        _check_same(maps[0], m)
        _check_same(maps[0], k)
    best = maps[0]
    best_ok = torch.as_tensor(masks[0], dtype=torch.bool)
    record = kinks.active()
    idx = torch.zeros_like(best_ok, dtype=torch.long) if record else None
    for i in range(1, len(maps)):
        ok = torch.as_tensor(masks[i], dtype=torch.bool)
        take = ok & (~best_ok | (maps[i].detach() < best.detach()))
        best = torch.where(take, maps[i], best)
        if record:
            idx = torch.where(take, torch.full_like(idx, i), idx)
        best_ok = best_ok | ok
    if record:
        kinks.note(idx, best_ok)
    any_valid, out = best_ok, best
    return torch.where(any_valid, out, torch.zeros_like(out)), any_valid


def auto_mask(target_res: Sequence[torch.Tensor], identity_res: Sequence[torch.Tensor],
              target_masks=None, identity_masks=None) -> torch.Tensor:
    """Keep pixels whose best synthesized residual beats the best unwarped one."""
    with torch.no_grad():
        syn, syn_ok = min_reprojection([r.detach() for r in target_res], target_masks)
        ident, id_ok = min_reprojection([r.detach() for r in identity_res], identity_masks)
    _check_same(syn, ident)
    ident = torch.where(id_ok, ident, torch.full_like(ident, math.inf))
    keep = syn_ok & (syn < ident)
    kinks.note(keep)
    return keep


def smoothness_loss(disp, img, valid=None) -> torch.Tensor:
    """Edge-aware smoothness of mean-normalized disparity.

    ``disp`` may carry leading dimensions; one value is returned per map.
    """
    disp, img = as_tensor(disp), as_tensor(img)
    if disp.shape[-2:] != img.shape[-2:]:
        raise ContractViolation(f"extent mismatch: {tuple(disp.shape)} vs {tuple(img.shape)}")
    if valid is None:
        valid = torch.ones(disp.shape[-2:], dtype=torch.bool)
    if not bool(valid.any()):
        raise ContractViolation("no valid pixels")
    d = disp / _masked_mean_hw(disp, valid)[..., None, None]
    dx = d[..., :, 1:] - d[..., :, :-1]
    dy = d[..., 1:, :] - d[..., :-1, :]
    if kinks.active():
        kinks.note(torch.sign(dx), torch.sign(dy))
    wx = torch.exp(-(img[..., :, 1:] - img[..., :, :-1]).abs())
    wy = torch.exp(-(img[..., 1:, :] - img[..., :-1, :]).abs())
    mx = valid[..., :, 1:] & valid[..., :, :-1]
    my = valid[..., 1:, :] & valid[..., :-1, :]
    if not bool(mx.any()) and not bool(my.any()):
        raise ContractViolation("smoothness needs at least one valid neighbour pair")
    return _masked_mean_hw(dx.abs() * wx, mx) + _masked_mean_hw(dy.abs() * wy, my)


def _softplus_clamped(z: torch.Tensor) -> torch.Tensor:
    return torch.log1p(torch.exp(z.clamp(-EXP_CLAMP, EXP_CLAMP)))


def ordinal_pair_loss(d_mono_a, d_mono_b, d_teacher_a, d_teacher_b, alpha: float = 1.1, beta: float = 0.9):
    """Ranking loss of pixel ``a`` against its neighbour ``b`` (elementwise)."""
    ma, mb = as_tensor(d_mono_a), as_tensor(d_mono_b)
    ta, tb = as_tensor(d_teacher_a), as_tensor(d_teacher_b)
    if bool(torch.any(ta <= 0)) or bool(torch.any(tb <= 0)):
        raise ContractViolation("teacher depths must be positive")
    diff = ma - mb
    farther = ta > alpha * tb
    closer = ta < beta * tb
    if kinks.active():
        kinks.note(torch.sign(diff))
    return torch.where(farther, _softplus_clamped(-diff),
                       torch.where(closer, _softplus_clamped(diff), diff.abs()))


def _pair_term(mono, teacher, valid, alpha, beta, axis):
    if axis == 1:
        a, b = (slice(None), slice(1, None)), (slice(None), slice(None, -1))
    else:
        a, b = (slice(1, None), slice(None)), (slice(None, -1), slice(None))
    ok = valid[a] & valid[b]
    if not bool(ok.any()):
        return None
    ta = torch.where(ok, teacher[a], torch.ones_like(teacher[a]))
    tb = torch.where(ok, teacher[b], torch.ones_like(teacher[b]))
    return _masked_mean(ordinal_pair_loss(mono[a], mono[b], ta, tb, alpha, beta), ok)


def ordinal_distillation_loss(D_mono: DepthGrid, D_teacher: DepthGrid, alpha: float = 1.1,
                              beta: float = 0.9) -> torch.Tensor:
    """Left-neighbour plus upper-neighbour ranking loss, each averaged over its own pairs."""
    _check_same(D_mono.depth, D_teacher.depth)
    valid = D_mono.valid & D_teacher.valid
    left = _pair_term(D_mono.depth, D_teacher.depth, valid, alpha, beta, axis=1)
    top = _pair_term(D_mono.depth, D_teacher.depth, valid, alpha, beta, axis=0)
    if left is None and top is None:
        raise ContractViolation("no jointly valid neighbour pairs")
    zero = torch.zeros((), dtype=D_mono.depth.dtype)
    return (zero if left is None else left) + (zero if top is None else top)


def _median(x: torch.Tensor) -> torch.Tensor:
    s, order = torch.sort(x)
    kinks.note(order)
    n = s.numel()
    if n % 2:
        return s[n // 2]
    return 0.5 * (s[n // 2 - 1] + s[n // 2])


def normalize_scale_shift(D: DepthGrid) -> torch.Tensor:
    """``(D - median) / mean|D - median|`` over valid pixels; invalid entries are 0."""
    vals = D.depth[D.valid]
    if vals.numel() == 0:
        raise ContractViolation("normalization needs at least one valid pixel")
    t = _median(vals)
    dev = vals - t
    if kinks.active():
        kinks.note(torch.sign(dev))
    s = dev.abs().mean()
    if float(s.detach()) < 1e-12:
        raise ContractViolation("degenerate spread: input is constant over valid pixels")
    out = (D.depth - t) / s
    return torch.where(D.valid, out, torch.zeros_like(out))


def scale_invariant_loss(D_mono: DepthGrid, D_teacher: DepthGrid) -> torch.Tensor:
    _check_same(D_mono.depth, D_teacher.depth)
    valid = D_mono.valid & D_teacher.valid
    m = normalize_scale_shift(DepthGrid(D_mono.depth, valid))
    t = normalize_scale_shift(DepthGrid(D_teacher.depth, valid))
    diff = m - t
    if kinks.active():
        kinks.note(torch.sign(diff))
    return _masked_mean(diff.abs(), valid)


def decay_factor(steps: int, sched: DecaySchedule = DecaySchedule()) -> float:
    if steps < 0:
        raise DomainError("steps must be nonnegative")
    lam = steps / sched.period if sched.continuous else steps // sched.period
    return sched.base ** (2 * lam)


def sigmoid_to_depth(sigma, d_min: float = 0.1, d_max: float = 100.0):
    """Map ``sigma`` in [0, 1] to depth in [d_min, d_max]; 0 -> d_max, 1 -> d_min."""
    s = as_tensor(sigma)
    if bool(torch.any(s < 0)) or bool(torch.any(s > 1)) or not bool(torch.all(torch.isfinite(s))):
        raise DomainError("sigma must lie in [0, 1]")
    b = 1.0 / d_max
    a = 1.0 / d_min - 1.0 / d_max
    return 1.0 / (a * s + b)


def erode3(mask: torch.Tensor) -> torch.Tensor:
    """Pixels whose whole 3x3 neighbourhood (clipped at the border) is valid."""
    H, W = mask.shape[-2:]
    padded = torch.ones(mask.shape[:-2] + (H + 2, W + 2), dtype=torch.bool)
    padded[..., 1:-1, 1:-1] = mask
    out = mask.clone()
    for dy in range(3):
        for dx in range(3):
            out &= padded[..., dy:dy + H, dx:dx + W]
    return out


class Frames:
    """Per-snippet quantities that do not depend on the depth estimate.

    Holds the target, the sources with their poses and, for the chosen
    synthesis domain, the comparison-domain target, the unwarped-source
    residuals used by auto-masking and the cached sampling geometry.
    """

    def __init__(self, target, sources: Sequence, poses: Sequence[RigidPose], intr: FisheyeIntrinsics,
                 cfg: LossConfig = LossConfig(), fisheye_valid=None):
        self.target = as_tensor(target)
        self.sources = [as_tensor(s) for s in sources]
        self.poses = list(poses)
        if len(self.sources) != len(self.poses) or not self.sources:
            raise ContractViolation("need one pose per source frame and at least one source")
        for s in self.sources:
            _check_same(self.target, s)
        if self.target.shape != (intr.height, intr.width):
            raise ContractViolation("frames do not match the intrinsics' image size")
        self.intr = intr
        self.cfg = cfg
        self.rays = FisheyeRays(intr) if cfg.domain == "fisheye" else None
        self.depth_valid = self.rays.valid if self.rays is not None else torch.ones_like(self.target, dtype=torch.bool)
        if fisheye_valid is not None:
            self.depth_valid = self.depth_valid & torch.as_tensor(fisheye_valid, dtype=torch.bool)
        if cfg.domain == "rectified":
            self.rect = rectified_intrinsics(intr, cfg.focal_scale)
            self.lookup = fisheye_lookup_grid(intr, self.rect)
            self.cmp_target, self.cmp_valid = bilinear_sample(self.target, self.lookup)
            cmp_sources = [bilinear_sample(s, self.lookup) for s in self.sources]
        else:
            self.rect = None
            self.lookup = None
            self.cmp_target, self.cmp_valid = self.target, self.depth_valid.clone()
            cmp_sources = [(s, self.depth_valid) for s in self.sources]
        self.identity_res = []
        self.identity_valid = []
        for img, ok in cmp_sources:
            both = erode3(ok & self.cmp_valid)
            self.identity_res.append(photometric_residual(img, self.cmp_target, cfg.ssim_weight))
            self.identity_valid.append(both)
        ident, ident_ok = min_reprojection(self.identity_res, self.identity_valid)
        # best unwarped residual; pixels without one never mask anything out
        self.identity_floor = torch.where(ident_ok, ident, torch.full_like(ident, math.inf))
        self.source_stack = torch.stack(self.sources)
        self.rect_rays = rectified_rays(self.rect) if self.rect is not None else None

    def synthesize(self, depth: DepthGrid, index: int, pose: RigidPose | None = None):
        pose = self.poses[index] if pose is None else pose
        if self.cfg.domain == "rectified":
            d_hat = rectify_depth(depth, self.intr, self.rect, self.lookup)
            return synthesize_view(self.sources[index], d_hat, pose, self.intr, self.rect)
        return synthesize_view_fisheye(self.sources[index], depth, pose, self.intr, self.rays)

    def synthesize_all(self, depths: torch.Tensor, poses: Sequence[RigidPose] | None = None):
        """Synthesize every source from every depth map in ``depths`` (``L x H x W``).

        Returns ``(images, valid)`` of shape ``S x L x h x w`` in the comparison domain.
        """
        poses = self.poses if poses is None else poses
        if len(poses) != len(self.sources):
            raise ContractViolation("need one pose per source frame")
        if bool(torch.any((depths.detach() <= 0) & self.depth_valid)):
            raise ContractViolation("valid depths must be positive and finite")
        R = torch.stack([p.rotation for p in poses])
        t = torch.stack([p.translation for p in poses])
        if self.cfg.domain == "rectified":
            d_hat, base = bilinear_sample(depths, self.lookup, mask=self.depth_valid)
            d_hat = torch.where(base, d_hat, torch.ones_like(d_hat))
            P = self.rect_rays * d_hat[..., None]
        else:
            base = (self.depth_valid & self.rays.valid).expand(depths.shape)
            P = self.rays.rays * torch.where(base, depths, torch.ones_like(depths))[..., None]
        Pt = torch.einsum("sij,lhwj->slhwi", R, P) + t[:, None, None, None, :]
        uv, pvalid = project(Pt, self.intr)
        grid = SampleGrid(uv[..., 0], uv[..., 1], pvalid & base)
        return bilinear_sample(self.source_stack[:, None], grid)


def _photometric_batch(frames: Frames, depths: torch.Tensor, poses=None):
    """Per-map photometric loss for ``L x H x W`` depths; returns ``(L values, best, mask)``."""
    imgs, ok = frames.synthesize_all(depths, poses)
    ok = erode3(ok & frames.cmp_valid)
    res = photometric_residual(imgs, frames.cmp_target.expand_as(imgs), frames.cfg.ssim_weight)
    best, best_ok = min_reprojection(list(res), list(ok))
    # same decision as auto_mask, reusing the minimum and the precomputed unwarped floor
    keep = best_ok & (best.detach() < frames.identity_floor)
    kinks.note(keep)
    has = keep.any(dim=-1).any(dim=-1)
    use = torch.where(has[:, None, None], keep, best_ok)
    return _masked_mean_hw(best, use), best, use


def photometric_loss(frames: Frames, depth: DepthGrid, poses: Sequence[RigidPose] | None = None,
                     keep_maps: bool = False):
    """Auto-masked minimum reprojection loss averaged over surviving pixels.

    Falls back to the unmasked minimum when auto-masking removes every pixel.
    Returns 0 when no pixel can be synthesized at all.
    """
    if depth.shape != frames.target.shape:
        raise ContractViolation("depth map does not match the frame size")
    if not torch.equal(depth.valid, frames.depth_valid):
        frames = _with_depth_valid(frames, depth.valid)
    ph, best, use = _photometric_batch(frames, depth.depth[None], poses)
    maps = {"residual": best[0].detach(), "mask": use[0]} if keep_maps else {}
    return ph[0], maps


def _with_depth_valid(frames: Frames, valid: torch.Tensor) -> Frames:
    out = object.__new__(Frames)
    out.__dict__.update(frames.__dict__)
    out.depth_valid = valid & frames.depth_valid
    return out


def upsample(x: torch.Tensor, shape) -> torch.Tensor:
    if tuple(x.shape[-2:]) == tuple(shape):
        return x
    lead = x.shape[:-2]
    y = F.interpolate(x.reshape((-1, 1) + tuple(x.shape[-2:])), size=tuple(shape), mode="bilinear",
                      align_corners=False)
    return y.reshape(lead + tuple(shape))


def total_loss(frames: Frames, depths: Sequence[torch.Tensor], teacher: DepthGrid | None = None,
               cfg: LossConfig | None = None, sched: DecaySchedule = DecaySchedule(), steps: int = 0,
               poses: Sequence[RigidPose] | None = None, keep_maps: bool = False):
    """Multi-scale total loss.

    ``depths[s]`` is the depth estimate at pyramid level ``s`` (any resolution;
    coarser levels are bilinearly upsampled to full resolution). Returns
    ``(total, report)`` where ``total`` is a differentiable scalar tensor and
    ``report.total == ph + w_sm * sm + s * (w_od * od + w_sd * sd)``, with
    ``ph`` and ``sm`` already averaged over scales (``sm`` includes the
    ``1 / 2**scale`` per-level factor).
    """
    cfg = frames.cfg if cfg is None else cfg
    if len(depths) != cfg.scales:
        raise ContractViolation(f"expected {cfg.scales} depth levels, got {len(depths)}")
    shape = tuple(frames.target.shape)
    valid = frames.depth_valid
    full = torch.stack([upsample(as_tensor(d), shape) for d in depths])
    ph_l, best, use = _photometric_batch(frames, full, poses)
    level_w = torch.tensor([2.0**-s for s in range(len(depths))], dtype=full.dtype)
    sm_l = smoothness_loss(1.0 / full, frames.target, valid) * level_w
    ph = ph_l.mean()
    sm = sm_l.mean()
    maps = {"residual": best[0].detach(), "mask": use[0]} if keep_maps else {}
    zero = torch.zeros((), dtype=ph.dtype)
    od = sd = zero
    if teacher is not None and (cfg.w_od > 0 or cfg.w_sd > 0):
        finest = DepthGrid(full[0], valid)
        _check_same(finest.depth, teacher.depth)
        od = ordinal_distillation_loss(finest, teacher, cfg.alpha, cfg.beta) if cfg.w_od > 0 else zero
        sd = scale_invariant_loss(finest, teacher) if cfg.w_sd > 0 else zero
    s = decay_factor(steps, sched)
    total = ph + cfg.w_sm * sm + s * (cfg.w_od * od + cfg.w_sd * sd)
    report = LossReport(*(float(x.detach()) for x in (ph, sm, od, sd, total)), steps, s, maps)
    return total, report
