"""Bilinear sampling and cross-view synthesis for fisheye frames.

Two synthesis domains are supported:

* ``rectified`` -- the fisheye depth is resampled onto a pinhole grid with
  reduced focal length, unprojected in closed form, moved into the source
  camera and projected back through the fisheye model. The result lives on
  the rectified grid and is compared against the target resampled onto the
  same grid (:func:`rectified_target`).
* ``fisheye`` -- every fisheye pixel is unprojected along its exact viewing
  ray (precomputed once by numeric inversion of the distortion polynomial);
  the result lives on the fisheye grid and is compared against the raw target.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

from . import kinks
from .errors import ContractViolation
from .geometry import (
    FisheyeIntrinsics,
    RectifiedIntrinsics,
    RigidPose,
    as_tensor,
    fisheye_ray_grid,
    project,
    rectified_rays,
    transform_points,
    unproject_rectified,
)


@dataclass
class SampleGrid:
    """Continuous sampling positions ``(u, v)`` per output pixel."""

    u: torch.Tensor
    v: torch.Tensor
    valid: torch.Tensor

    @property
    def shape(self):
        return self.u.shape


@dataclass
class DepthGrid:
    depth: torch.Tensor
    valid: torch.Tensor

    def __post_init__(self):
        self.depth = as_tensor(self.depth)
        if self.valid is None:
            self.valid = torch.isfinite(self.depth)
        self.valid = torch.as_tensor(self.valid, dtype=torch.bool)
        if self.valid.shape != self.depth.shape:
            raise ContractViolation("depth and validity mask disagree in shape")
        d = self.depth.detach()
        if bool(torch.any(self.valid & ~(d > 0))) or bool(torch.any(self.valid & ~torch.isfinite(d))):
            raise ContractViolation("valid depths must be positive and finite")

    @classmethod
    def full(cls, depth) -> "DepthGrid":
        depth = as_tensor(depth)
        return cls(depth, torch.ones_like(depth, dtype=torch.bool))

    @property
    def shape(self):
        return self.depth.shape


def identity_grid(height: int, width: int) -> SampleGrid:
    v, u = torch.meshgrid(
        torch.arange(height, dtype=torch.float64), torch.arange(width, dtype=torch.float64), indexing="ij"
    )
    return SampleGrid(u, v, torch.ones_like(u, dtype=torch.bool))


def bilinear_sample(img, grid: SampleGrid, mask=None) -> tuple[torch.Tensor, torch.Tensor]:
    """Sample ``img`` (``... x H x W``) at ``grid`` (``... x h x w``).

    Leading dimensions of image and grid broadcast against each other. An
    output is valid only if its grid entry is valid and all four support pixels
    lie inside the image (and inside ``mask`` when given). Invalid outputs are
    0. Positions on the last row/column use the cell below/left of them so that
    ``u == W - 1`` stays in support.
    """
    img = as_tensor(img)
    H, W = img.shape[-2:]
    u, v = grid.u, grid.v
    ok = grid.valid & torch.isfinite(u) & torch.isfinite(v)
    ok = ok & (u >= 0) & (u <= W - 1) & (v >= 0) & (v <= H - 1)
    us = torch.where(ok, u, torch.zeros_like(u))
    vs = torch.where(ok, v, torch.zeros_like(v))
    x0 = torch.floor(us.detach()).clamp(0, max(W - 2, 0)).long()
    y0 = torch.floor(vs.detach()).clamp(0, max(H - 2, 0)).long()
    x1 = (x0 + 1).clamp(max=W - 1)
    y1 = (y0 + 1).clamp(max=H - 1)
    wx = us - x0
    wy = vs - y0

    lead = torch.broadcast_shapes(img.shape[:-2], u.shape[:-2])
    out_hw = u.shape[-2:]
    flat = img.expand(lead + (H, W)).reshape(-1, H * W)

    def take(src, yy, xx):
        idx = (yy * W + xx).expand(lead + out_hw).reshape(flat.shape[0], -1)
        return src.gather(1, idx).reshape(lead + out_hw)

    out = (
        (1 - wx) * (1 - wy) * take(flat, y0, x0)
        + wx * (1 - wy) * take(flat, y0, x1)
        + (1 - wx) * wy * take(flat, y1, x0)
        + wx * wy * take(flat, y1, x1)
    )
    ok = ok.expand(lead + out_hw)
    if mask is not None:
        m = torch.as_tensor(mask, dtype=torch.bool)
        mflat = m.expand(lead + (H, W)).reshape(-1, H * W)
        ok = ok & take(mflat, y0, x0) & take(mflat, y0, x1) & take(mflat, y1, x0) & take(mflat, y1, x1)
    kinks.note(x0, y0, ok)
    return torch.where(ok, out, torch.zeros_like(out)), ok


def fisheye_lookup_grid(intr: FisheyeIntrinsics, rect: RectifiedIntrinsics) -> SampleGrid:
    """Fisheye position of every rectified pixel's ray."""
    uv, valid = project(rectified_rays(rect), intr)
    u, v = uv[..., 0], uv[..., 1]
    valid = valid & (u >= 0) & (u <= intr.width - 1) & (v >= 0) & (v <= intr.height - 1)
    return SampleGrid(u, v, valid)


def rectify_depth(D: DepthGrid, intr: FisheyeIntrinsics, rect: RectifiedIntrinsics,
                  lookup: SampleGrid | None = None) -> DepthGrid:
    if lookup is None:
        lookup = fisheye_lookup_grid(intr, rect)
    depth, valid = bilinear_sample(D.depth, lookup, mask=D.valid)
    return DepthGrid(torch.where(valid, depth, torch.ones_like(depth)), valid)


def rectified_target(I_t, intr: FisheyeIntrinsics, rect: RectifiedIntrinsics,
                     lookup: SampleGrid | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    if lookup is None:
        lookup = fisheye_lookup_grid(intr, rect)
    return bilinear_sample(I_t, lookup)


def synthesize_view(I_src, D_hat: DepthGrid, pose: RigidPose, intr: FisheyeIntrinsics,
                    rect: RectifiedIntrinsics) -> tuple[torch.Tensor, torch.Tensor]:
    """Reconstruct the target on the rectified grid by sampling ``I_src``.

    ``pose`` maps target-camera points into the source camera.
    """
    depth = torch.where(D_hat.valid, D_hat.depth, torch.ones_like(D_hat.depth))
    P = unproject_rectified(depth, rect)
    uv, pvalid = project(transform_points(P, pose), intr)
    return bilinear_sample(I_src, SampleGrid(uv[..., 0], uv[..., 1], pvalid & D_hat.valid))


class FisheyeRays:
    """Cached per-pixel viewing rays, scaled so that ``z == 1``."""

    def __init__(self, intr: FisheyeIntrinsics):
        rays, valid = fisheye_ray_grid(intr)
        self.intr = intr
        self.valid = valid
        self.rays = torch.where(valid[..., None], rays / rays[..., 2:3].clamp(min=1e-12), torch.zeros_like(rays))


def synthesize_view_fisheye(I_src, D: DepthGrid, pose: RigidPose, intr: FisheyeIntrinsics,
                            rays: FisheyeRays | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Reconstruct the target on its own fisheye grid by sampling ``I_src``."""
    if rays is None:
        rays = FisheyeRays(intr)
    valid = D.valid & rays.valid
    depth = torch.where(valid, D.depth, torch.ones_like(D.depth))
    P = rays.rays * depth[..., None]
    uv, pvalid = project(transform_points(P, pose), intr)
    return bilinear_sample(I_src, SampleGrid(uv[..., 0], uv[..., 1], pvalid & valid))
