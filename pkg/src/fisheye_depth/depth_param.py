"""Unconstrained per-pixel parameterization of a depth pyramid.

Level ``l`` holds a ``ceil(h / 2**l) x ceil(w / 2**l)`` grid of logits. Each
logit is squashed by the logistic function and mapped to depth through the
bounded reciprocal map, so larger logits mean nearer surfaces.
"""
from __future__ import annotations

import math
from typing import Sequence

import torch

from .errors import DomainError
from .geometry import as_tensor
from .losses import sigmoid_to_depth, upsample

LOGIT_CLAMP = 30.0


def level_shape(height: int, width: int, level: int) -> tuple[int, int]:
    return math.ceil(height / 2**level), math.ceil(width / 2**level)


def zero_pyramid(height: int, width: int, levels: int) -> list[torch.Tensor]:
    return [torch.zeros(level_shape(height, width, l), dtype=torch.float64) for l in range(levels)]


def logits_to_depth(logits, d_min: float = 0.1, d_max: float = 100.0) -> torch.Tensor:
    return sigmoid_to_depth(torch.sigmoid(as_tensor(logits)), d_min, d_max)


def logits_to_depth_pyramid(pyramid: Sequence[torch.Tensor], d_min: float = 0.1, d_max: float = 100.0,
                            full_shape=None) -> list[torch.Tensor]:
    """Depth for every level, bilinearly upsampled to ``full_shape`` (default: level 0's shape)."""
    shape = tuple(pyramid[0].shape) if full_shape is None else tuple(full_shape)
    return [upsample(logits_to_depth(g, d_min, d_max), shape) for g in pyramid]


def depth_to_logits(depth, d_min: float = 0.1, d_max: float = 100.0) -> torch.Tensor:
    """Exact inverse of :func:`logits_to_depth`, clamped to ``|logit| <= 30``."""
    D = as_tensor(depth)
    if bool(torch.any(~(D > d_min))) or bool(torch.any(~(D < d_max))):
        raise DomainError(f"depth outside the open interval ({d_min}, {d_max})")
    b = 1.0 / d_max
    a = 1.0 / d_min - 1.0 / d_max
    sigma = (1.0 / D - b) / a
    return torch.logit(sigma).clamp(-LOGIT_CLAMP, LOGIT_CLAMP)


def compose_residual(residuals: Sequence[torch.Tensor]) -> list[torch.Tensor]:
    """Coarse-to-fine accumulation: level ``l`` = own residual + upsampled level ``l + 1``.

    Lets gradients from every scale reach the finest depth through the coarse
    parameters.
    """
    out = [None] * len(residuals)
    acc = None
    for l in range(len(residuals) - 1, -1, -1):
        r = residuals[l]
        acc = r if acc is None else r + upsample(acc, r.shape)
        out[l] = acc
    return out
