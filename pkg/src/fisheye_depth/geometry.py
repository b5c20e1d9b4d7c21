"""Fisheye camera model, rectified pinhole grid and rigid transforms.

Pixel coordinates are ``(u, v) = (column, row)`` with the origin at the
centre of the top-left pixel. Rasters are ``(height, width)`` tensors, so the
value at ``(u, v)`` lives at ``raster[v, u]``. Depth is Z-depth (distance
along the optical axis), never ray length.

All tensors are float64.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import torch

from .errors import ContractViolation, DomainError

DTYPE = torch.float64

# below this normalized radius the projection uses the series of g(r) = phi(atan r) / r
SMALL_RADIUS = 1e-8


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if x.dtype == DTYPE else x.to(DTYPE)
    return torch.as_tensor(x, dtype=DTYPE)


@dataclass(frozen=True)
class FisheyeIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    k1: float = 0.0
    k2: float = 0.0
    k3: float = 0.0
    k4: float = 0.0
    width: int = 640
    height: int = 400
    theta_max: float = 1.65

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ContractViolation(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 < self.theta_max <= math.pi / 2 + 0.35):
            raise ContractViolation(f"theta_max={self.theta_max} outside (0, pi/2 + 0.35]")
        if self.width < 1 or self.height < 1:
            raise ContractViolation("image size must be positive")
        theta = torch.linspace(0.0, self.theta_max, 1024, dtype=DTYPE)
        phi = _phi(theta, self.coeffs)
        if not bool(torch.all(phi[1:] > phi[:-1])):
            raise ContractViolation(
                f"distortion polynomial is not strictly increasing on [0, {self.theta_max}]"
            )

    @property
    def coeffs(self) -> tuple[float, float, float, float]:
        return (self.k1, self.k2, self.k3, self.k4)

    @property
    def max_radius(self) -> float:
        """Distorted radius reached at ``theta_max``."""
        return float(_phi(torch.tensor(self.theta_max, dtype=DTYPE), self.coeffs))


@dataclass(frozen=True)
class RectifiedIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ContractViolation("rectified focal lengths must be positive")


@dataclass(frozen=True)
class RigidPose:
    """Rigid transform ``p' = R p + t``."""

    rotation: torch.Tensor = field(default_factory=lambda: torch.eye(3, dtype=DTYPE))
    translation: torch.Tensor = field(default_factory=lambda: torch.zeros(3, dtype=DTYPE))
    check: bool = field(default=True, repr=False, compare=False)

    def __post_init__(self):
        R = as_tensor(self.rotation)
        t = as_tensor(self.translation).reshape(3)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        if R.shape != (3, 3):
            raise ContractViolation(f"rotation must be 3x3, got {tuple(R.shape)}")
        if self.check:
            Rd = R.detach()
            if not bool(torch.all(torch.isfinite(Rd))) or not bool(torch.all(torch.isfinite(t.detach()))):
                raise ContractViolation("pose contains non-finite values")
            if float((Rd.T @ Rd - torch.eye(3, dtype=DTYPE)).abs().max()) > 1e-9:
                raise ContractViolation("rotation is not orthonormal")
            if abs(float(torch.linalg.det(Rd)) - 1.0) > 1e-9:
                raise ContractViolation("rotation determinant is not +1")

    @classmethod
    def identity(cls) -> "RigidPose":
        return cls()

    @classmethod
    def from_matrix(cls, m) -> "RigidPose":
        m = as_tensor(m)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_rotvec(cls, rotvec: Sequence[float], translation: Sequence[float]) -> "RigidPose":
        return cls(so3_exp(as_tensor(rotvec)), as_tensor(translation))

    def matrix(self) -> torch.Tensor:
        m = torch.eye(4, dtype=DTYPE)
        m = m.clone()
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> "RigidPose":
        Rt = self.rotation.transpose(0, 1)
        return RigidPose(Rt, -(Rt @ self.translation), check=self.check)

    def compose(self, other: "RigidPose") -> "RigidPose":
        """``self ∘ other``: apply ``other`` first."""
        return RigidPose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
            check=self.check and other.check,
        )

    def rows(self) -> list[float]:
        """Row-major 3x4 ``[R | t]``."""
        return [float(x) for x in self.matrix()[:3].reshape(-1)]


def hat(w: torch.Tensor) -> torch.Tensor:
    z = torch.zeros((), dtype=w.dtype)
    return torch.stack([
        torch.stack([z, -w[2], w[1]]),
        torch.stack([w[2], z, -w[0]]),
        torch.stack([-w[1], w[0], z]),
    ])


def so3_exp(w: torch.Tensor) -> torch.Tensor:
    return torch.linalg.matrix_exp(hat(as_tensor(w)))


def se3_exp(xi: torch.Tensor) -> RigidPose:
    """Pose from a 6-vector tangent increment ``(rotation vector, translation)``."""
    xi = as_tensor(xi)
    top = torch.cat([hat(xi[:3]), xi[3:, None]], dim=1)
    e = torch.linalg.matrix_exp(torch.cat([top, torch.zeros((1, 4), dtype=DTYPE)], dim=0))
    return RigidPose(e[:3, :3], e[:3, 3], check=False)


def _phi(theta: torch.Tensor, k: Sequence[float]) -> torch.Tensor:
    t2 = theta * theta
    return theta * (1 + t2 * (k[0] + t2 * (k[1] + t2 * (k[2] + t2 * k[3]))))


def _dphi(theta: torch.Tensor, k: Sequence[float]) -> torch.Tensor:
    t2 = theta * theta
    return 1 + t2 * (3 * k[0] + t2 * (5 * k[1] + t2 * (7 * k[2] + t2 * 9 * k[3])))


def distortion_radius(theta, intr: FisheyeIntrinsics) -> torch.Tensor:
    theta = as_tensor(theta)
    if bool(torch.any(theta < 0)) or bool(torch.any(theta > intr.theta_max)):
        raise DomainError(f"incidence angle outside [0, {intr.theta_max}]")
    return _phi(theta, intr.coeffs)


def project(points, intr: FisheyeIntrinsics) -> tuple[torch.Tensor, torch.Tensor]:
    """Project ``(..., 3)`` camera-frame points to fisheye pixels.

    Returns ``(uv, valid)`` with ``uv`` of shape ``(..., 2)``. Points behind the
    camera or beyond ``theta_max`` are flagged invalid; their ``uv`` is finite
    but meaningless.
    """
    P = as_tensor(points)
    X, Y, Z = P[..., 0], P[..., 1], P[..., 2]
    front = Z > 0
    Zs = torch.where(front, Z, torch.ones_like(Z))
    x = X / Zs
    y = Y / Zs
    r2 = x * x + y * y
    small = r2 < SMALL_RADIUS**2
    r = torch.sqrt(torch.where(small, torch.ones_like(r2), r2))
    theta = torch.atan(r)
    g_far = _phi(theta, intr.coeffs) / r
    # g(r) = 1 + (k1 - 1/3) r^2 + O(r^4)
    g_near = 1 + (intr.k1 - 1.0 / 3.0) * r2
    g = torch.where(small, g_near, g_far)
    u = intr.fx * x * g + intr.cx
    v = intr.fy * y * g + intr.cy
    theta_true = torch.where(small, torch.sqrt(r2.detach()), theta.detach())
    valid = front & (theta_true <= intr.theta_max) & torch.isfinite(u) & torch.isfinite(v)
    return torch.stack([u, v], dim=-1), valid


def invert_distortion(radius_d, intr: FisheyeIntrinsics, tol: float = 1e-10) -> torch.Tensor:
    """Incidence angle ``theta`` whose distorted radius equals ``radius_d``."""
    rd = as_tensor(radius_d).detach()
    rmax = intr.max_radius
    if bool(torch.any(rd < 0)) or bool(torch.any(rd > rmax * (1 + 1e-12))):
        raise DomainError(f"distorted radius outside [0, {rmax}]")
    k = intr.coeffs
    lo = torch.zeros_like(rd)
    hi = torch.full_like(rd, intr.theta_max)
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        above = _phi(mid, k) > rd
        hi = torch.where(above, mid, hi)
        lo = torch.where(above, lo, mid)
    theta = 0.5 * (lo + hi)
    for _ in range(3):
        step = (_phi(theta, k) - rd) / _dphi(theta, k)
        theta = (theta - step).clamp(0.0, intr.theta_max)
    resid = (_phi(theta, k) - rd).abs()
    if bool(torch.any(resid > tol)):
        raise DomainError(f"distortion inversion did not converge (residual {float(resid.max()):.3g})")
    return theta


def unproject_fisheye_ray(u, v, intr: FisheyeIntrinsics) -> torch.Tensor:
    """Unit viewing direction of fisheye pixel(s) ``(u, v)``; shape ``(..., 3)``."""
    xd = (as_tensor(u) - intr.cx) / intr.fx
    yd = (as_tensor(v) - intr.cy) / intr.fy
    rd = torch.sqrt(xd * xd + yd * yd)
    theta = invert_distortion(rd, intr)
    small = rd < SMALL_RADIUS
    rs = torch.where(small, torch.ones_like(rd), rd)
    s = torch.sin(theta) / rs
    # near the axis sin(theta) / r_d = 1 + O(r_d^2)
    dx = torch.where(small, xd, s * xd)
    dy = torch.where(small, yd, s * yd)
    dz = torch.where(small, torch.ones_like(rd), torch.cos(theta))
    return torch.stack([dx, dy, dz], dim=-1)


def fisheye_ray_grid(intr: FisheyeIntrinsics, min_cos: float = 1e-3) -> tuple[torch.Tensor, torch.Tensor]:
    """Rays for every fisheye pixel, ``(H, W, 3)``, plus validity.

    Pixels outside the model's radius range, or whose ray is within
    ``acos(min_cos)`` of the image plane, are invalid (Z-depth is undefined there).
    """
    v, u = torch.meshgrid(
        torch.arange(intr.height, dtype=DTYPE), torch.arange(intr.width, dtype=DTYPE), indexing="ij"
    )
    xd = (u - intr.cx) / intr.fx
    yd = (v - intr.cy) / intr.fy
    inside = torch.sqrt(xd * xd + yd * yd) <= intr.max_radius
    rays = unproject_fisheye_ray(
        torch.where(inside, u, torch.full_like(u, intr.cx)),
        torch.where(inside, v, torch.full_like(v, intr.cy)),
        intr,
    )
    valid = inside & (rays[..., 2] > min_cos)
    return rays, valid


def rectified_intrinsics(intr: FisheyeIntrinsics, scale: float = 0.8) -> RectifiedIntrinsics:
    if not scale > 0:
        raise ContractViolation(f"focal scale must be positive, got {scale}")
    return RectifiedIntrinsics(
        fx=scale * intr.fx,
        fy=scale * intr.fy,
        cx=(intr.width - 1) / 2,
        cy=(intr.height - 1) / 2,
        width=intr.width,
        height=intr.height,
    )


def rectified_rays(rect: RectifiedIntrinsics) -> torch.Tensor:
    """``(H, W, 3)`` un-normalized rays ``((u - cx')/fx', (v - cy')/fy', 1)``."""
    v, u = torch.meshgrid(
        torch.arange(rect.height, dtype=DTYPE), torch.arange(rect.width, dtype=DTYPE), indexing="ij"
    )
    return torch.stack([(u - rect.cx) / rect.fx, (v - rect.cy) / rect.fy, torch.ones_like(u)], dim=-1)


def unproject_rectified(depth, rect: RectifiedIntrinsics, valid=None) -> torch.Tensor:
    """Points ``D(v, u) * K'^-1 (u, v, 1)`` on the rectified grid, ``(H, W, 3)``."""
    depth = as_tensor(depth)
    if valid is None:
        valid = torch.ones_like(depth, dtype=torch.bool)
    if bool(torch.any((depth.detach() <= 0) & valid)):
        raise ContractViolation("nonpositive depth at a valid rectified pixel")
    return rectified_rays(rect) * depth[..., None]


def transform_points(points, pose: RigidPose) -> torch.Tensor:
    return as_tensor(points) @ pose.rotation.transpose(0, 1) + pose.translation
