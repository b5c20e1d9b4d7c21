"""Ray-cast renderer for synthetic fisheye snippets with exact depth.

Scenes are built from textured planes and spheres. Textures are solid
patterns evaluated at the 3-D surface point (world frame for planes, centre
frame for spheres), so they are attached to the surface, camera motion
produces true parallax and walls meeting at a crease join without a seam.
The renderer shoots one ray per fisheye pixel (no anti-aliasing); textures
are band-limited so that bilinear resampling of rendered frames stays
accurate.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import torch

from .errors import ContractViolation
from .geometry import DTYPE, FisheyeIntrinsics, RigidPose, as_tensor, fisheye_ray_grid
from .synthesis import DepthGrid

TEXTURES = ("checker", "sinusoid", "constant")
# softness of checker edges; tanh(k * s) keeps the pattern band-limited
CHECKER_SHARPNESS = 1.5
# per-axis phase so that no plane of the default scenes sits on a symmetric slice
PHASES = (0.3, 1.1, 2.3)


@dataclass(frozen=True)
class Texture:
    kind: str = "checker"
    base: float = 0.5
    contrast: float = 0.8
    frequency: float = 1.0  # cycles per scene unit

    def __post_init__(self):
        if self.kind not in TEXTURES:
            raise ContractViolation(f"unknown texture {self.kind!r}")
        if not 0 <= self.contrast <= 1:
            raise ContractViolation("texture contrast must lie in [0, 1]")

    def pattern(self, p: torch.Tensor) -> torch.Tensor:
        """Solid pattern in [-1, 1] at surface points ``p`` (``... x 3``).

        A sum of one sinusoid per axis: its gradient along any plane vanishes
        only at isolated points, so no surface has textureless bands.
        """
        w = 2 * math.pi * self.frequency
        s = sum(torch.sin(w * p[..., i] + PHASES[i]) for i in range(3)) / 3
        if self.kind == "checker":
            k = CHECKER_SHARPNESS
            return torch.tanh(k * s) / math.tanh(k)
        if self.kind == "sinusoid":
            return s
        return torch.zeros_like(s)

    def shade(self, p, ambient: float = 1.0) -> torch.Tensor:
        return (ambient * (self.base + 0.5 * self.contrast * self.pattern(p))).clamp(0.0, 1.0)


@dataclass(frozen=True)
class Plane:
    center: tuple
    axis_u: tuple
    axis_v: tuple
    half_extent: tuple = (math.inf, math.inf)
    texture: Texture = Texture()

    def intersect(self, origin: torch.Tensor, dirs: torch.Tensor):
        c = as_tensor(self.center)
        eu = as_tensor(self.axis_u)
        eu = eu / eu.norm()
        ev = as_tensor(self.axis_v)
        ev = ev - (ev @ eu) * eu
        ev = ev / ev.norm()
        n = torch.linalg.cross(eu, ev)
        denom = dirs @ n
        ok = denom.abs() > 1e-12
        t = ((c - origin) @ n) / torch.where(ok, denom, torch.ones_like(denom))
        hit = origin + t[..., None] * dirs
        la, lb = (hit - c) @ eu, (hit - c) @ ev
        ok = ok & (t > 1e-9) & (la.abs() <= self.half_extent[0]) & (lb.abs() <= self.half_extent[1])
        return torch.where(ok, t, torch.full_like(t, math.inf)), hit


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float
    texture: Texture = Texture()

    def intersect(self, origin: torch.Tensor, dirs: torch.Tensor):
        c = as_tensor(self.center)
        oc = origin - c
        b = dirs @ oc
        disc = b * b - (oc @ oc - self.radius**2)
        ok = disc >= 0
        sq = torch.sqrt(torch.where(ok, disc, torch.zeros_like(disc)))
        t0, t1 = -b - sq, -b + sq
        t = torch.where(t0 > 1e-9, t0, t1)
        ok = ok & (t > 1e-9)
        p = origin + t[..., None] * dirs - c
        return torch.where(ok, t, torch.full_like(t, math.inf)), p


@dataclass(frozen=True)
class SceneSpec:
    primitives: tuple
    trajectory: tuple  # three camera-to-world poses (t-1, t, t+1)
    ambient: float = 1.0

    def __post_init__(self):
        if not self.primitives:
            raise ContractViolation("scene has no primitives")


@dataclass
class RenderOutput:
    image: torch.Tensor
    depth: DepthGrid
    valid: torch.Tensor


def render(scene: SceneSpec, intr: FisheyeIntrinsics, pose: RigidPose, min_coverage: float = 0.5) -> RenderOutput:
    """Render the scene from camera-to-world ``pose``."""
    rays, ray_ok = fisheye_ray_grid(intr)
    dirs = rays @ pose.rotation.T
    origin = pose.translation
    best = torch.full(ray_ok.shape, math.inf, dtype=DTYPE)
    image = torch.zeros(ray_ok.shape, dtype=DTYPE)
    for prim in scene.primitives:
        t, p = prim.intersect(origin, dirs)
        nearer = t < best
        best = torch.where(nearer, t, best)
        image = torch.where(nearer, prim.texture.shade(p, scene.ambient), image)
    valid = ray_ok & torch.isfinite(best)
    if float(valid.sum()) < min_coverage * float(ray_ok.sum()):
        raise ContractViolation("scene covers less than half of the valid pixels from this pose")
    zdepth = torch.where(valid, best * rays[..., 2], torch.ones_like(best))
    image = torch.where(valid, image, torch.zeros_like(image))
    return RenderOutput(image, DepthGrid(zdepth, valid), valid)


@dataclass
class Snippet:
    """Three rendered frames around the centre frame ``t``."""

    frames: list  # [I_{t-1}, I_t, I_{t+1}]
    poses: list  # camera-to-world poses
    gt_depth: DepthGrid
    valid: torch.Tensor

    @property
    def target(self):
        return self.frames[1]

    @property
    def sources(self):
        return [self.frames[0], self.frames[2]]

    @property
    def relative_poses(self) -> list[RigidPose]:
        """``T_{t,t'}`` mapping centre-camera points into source cameras."""
        return [relative_pose(self.poses[1], self.poses[0]), relative_pose(self.poses[1], self.poses[2])]


def relative_pose(pose_t: RigidPose, pose_s: RigidPose) -> RigidPose:
    """``pose_s^-1 ∘ pose_t``: camera ``t`` coordinates to camera ``s`` coordinates."""
    return pose_s.inverse().compose(pose_t)


def quantize(img: torch.Tensor, bits: int) -> torch.Tensor:
    levels = 2**bits - 1
    return torch.round(img * levels) / levels


def make_snippet(scene: SceneSpec, intr: FisheyeIntrinsics, bits: int | None = None) -> Snippet:
    if len(scene.trajectory) != 3:
        raise ContractViolation("trajectory must hold exactly three poses")
    outs = [render(scene, intr, p) for p in scene.trajectory]
    frames = [o.image if bits is None else quantize(o.image, bits) for o in outs]
    return Snippet(frames, list(scene.trajectory), outs[1].depth, outs[1].valid)


def adjacent_order(depth: torch.Tensor, tie_tol: float = 1e-9):
    """Sign of every horizontal and vertical neighbour difference, ties as 0."""
    out = []
    for a, b in ((depth[:, 1:], depth[:, :-1]), (depth[1:, :], depth[:-1, :])):
        d = a - b
        tie = d.abs() <= tie_tol * torch.maximum(a.abs(), b.abs())
        out.append(torch.where(tie, torch.zeros_like(d), torch.sign(d)))
    return out


def make_teacher(gt: DepthGrid, gamma: float = 1.0, bias_field=None) -> DepthGrid:
    """Order-preserving corruption of a ground-truth depth map.

    ``teacher = gt**gamma * bias`` rescaled to median 1. Every adjacent pair
    that is strictly ordered in ``gt`` must keep its order (pairs tied in
    ``gt`` are unconstrained), otherwise the bias field is rejected.
    """
    if not gamma > 0:
        raise ContractViolation("gamma must be positive")
    bias = torch.ones_like(gt.depth) if bias_field is None else as_tensor(bias_field)
    if bias.shape != gt.depth.shape or bool(torch.any(~(bias[gt.valid] > 0))):
        raise ContractViolation("bias field must be positive with the depth map's shape")
    depth = torch.where(gt.valid, gt.depth, torch.ones_like(gt.depth))
    teacher = depth**gamma * bias
    teacher = teacher / torch.quantile(teacher[gt.valid], 0.5)
    ref = adjacent_order(depth, tie_tol=1e-9)
    got = adjacent_order(teacher, tie_tol=0.0)
    pair_valid = (gt.valid[:, 1:] & gt.valid[:, :-1], gt.valid[1:, :] & gt.valid[:-1, :])
    for r, g, ok in zip(ref, got, pair_valid):
        strict = ok & (r != 0)
        if bool(torch.any(strict & (r != g))):
            raise ContractViolation("bias field changes the ordering of adjacent depths")
    return DepthGrid(torch.where(gt.valid, teacher, torch.ones_like(teacher)), gt.valid.clone())


def depth_bias_field(gt: DepthGrid, amplitude: float = 0.1, frequency: float = 2.0, seed: int = 0) -> torch.Tensor:
    """Smooth multiplicative bias ``exp(a sin(w log D + phase))``.

    A function of log-depth, so it is as smooth as the scene and preserves
    depth ordering whenever ``amplitude * frequency < gamma``.
    """
    g = torch.Generator().manual_seed(seed)
    phase = float(torch.rand((), generator=g, dtype=DTYPE)) * 2 * math.pi
    logd = torch.log(torch.where(gt.valid, gt.depth, torch.ones_like(gt.depth)))
    return torch.exp(amplitude * torch.sin(frequency * logd + phase))


def spatial_bias_field(shape, amplitude: float = 0.05, seed: int = 0) -> torch.Tensor:
    """Low-frequency multiplicative field over the image plane (one cosine period)."""
    g = torch.Generator().manual_seed(seed)
    ph = torch.rand(2, generator=g, dtype=DTYPE) * 2 * math.pi
    h, w = shape
    v, u = torch.meshgrid(torch.arange(h, dtype=DTYPE) / h, torch.arange(w, dtype=DTYPE) / w, indexing="ij")
    return torch.exp(amplitude * torch.cos(2 * math.pi * u + ph[0]) * torch.cos(math.pi * v + ph[1]))


# --- presets --------------------------------------------------------------------------------

PRESETS = ("textured", "low_contrast", "mixed")


def default_intrinsics(width: int = 96, height: int = 60) -> FisheyeIntrinsics:
    f = 0.42 * width
    return FisheyeIntrinsics(fx=f, fy=f, cx=(width - 1) / 2, cy=(height - 1) / 2,
                             k1=-0.01, k2=0.002, k3=0.0, k4=0.0, width=width, height=height)


def default_trajectory(baseline: float = 0.25, forward: float = 0.1, yaw: float = 0.02) -> tuple:
    return (
        RigidPose.from_rotvec([0.0, -yaw, 0.0], [-baseline, 0.0, -forward]),
        RigidPose.identity(),
        RigidPose.from_rotvec([0.0, yaw, 0.0], [baseline, 0.0, forward]),
    )


def room(textures: Sequence[Texture], width: float = 5.0, height: float = 2.5, depth: float = 5.0) -> list:
    """Back wall, left, right, floor, ceiling (in that order) around the origin; y points down."""
    back, left, right, floor, ceil = textures
    hw, hh = width / 2, height / 2
    return [
        Plane((0.0, 0.0, depth), (1.0, 0.0, 0.0), (0.0, 1.0, 0.0), texture=back),
        Plane((-hw, 0.0, 0.0), (0.0, 0.0, 1.0), (0.0, 1.0, 0.0), texture=left),
        Plane((hw, 0.0, 0.0), (0.0, 0.0, 1.0), (0.0, 1.0, 0.0), texture=right),
        Plane((0.0, hh, 0.0), (1.0, 0.0, 0.0), (0.0, 0.0, 1.0), texture=floor),
        Plane((0.0, -hh, 0.0), (1.0, 0.0, 0.0), (0.0, 0.0, 1.0), texture=ceil),
    ]


def preset_scene(name: str, trajectory: tuple | None = None, contrast_scale: float | None = None,
                 room_depth: float = 5.0, room_height: float = 2.5, wall_frequency: float = 0.3,
                 object_frequency: float = 0.5) -> SceneSpec:
    """Indoor-like box room with a sphere and a free-standing panel."""
    if name not in PRESETS:
        raise ContractViolation(f"unknown scene preset {name!r}; expected one of {PRESETS}")
    trajectory = default_trajectory() if trajectory is None else trajectory
    f = wall_frequency
    chk = Texture("checker", 0.5, 1.0, f)
    sin = Texture("sinusoid", 0.5, 1.0, f)
    flat = Texture("constant", 0.5, 0.0, f)
    if name == "mixed":
        walls = [chk, flat, sin, chk, flat]
        ball, panel = Texture("sinusoid", 0.5, 1.0, object_frequency), flat
    else:
        walls = [chk, chk, chk, chk, chk]
        ball = Texture("checker", 0.5, 1.0, object_frequency)
        panel = Texture("checker", 0.5, 1.0, 0.75 * object_frequency)
    k = room_depth / 5.0
    prims = room(walls, height=room_height, depth=room_depth) + [
        Sphere((0.7, 0.4, 2.6 * k), 0.6 * k, ball),
        Plane((-0.9, 0.3, 3.2 * k), (0.9, 0.0, 0.45), (0.0, 1.0, 0.0), half_extent=(0.6 * k, 0.8 * k), texture=panel),
    ]
    if contrast_scale is None:
        contrast_scale = 0.02 if name == "low_contrast" else 1.0
    if contrast_scale != 1.0:
        prims = [replace(p, texture=replace(p.texture, contrast=p.texture.contrast * contrast_scale)) for p in prims]
    return SceneSpec(tuple(prims), tuple(trajectory))
