"""Recording of the discrete decisions taken inside a loss evaluation.

The loss is piecewise smooth: bilinear cells, validity masks, minimum
selection, auto-masking, absolute values and median ranks switch at isolated
kinks. Finite-difference checks are only meaningful when a perturbation does
not cross one, so nonsmooth operations report their branch choices here and
``gradcheck`` compares the recordings at ``x - h``, ``x`` and ``x + h``.
"""
from __future__ import annotations

from contextlib import contextmanager
from contextvars import ContextVar

import torch

_trace: ContextVar[list | None] = ContextVar("_trace", default=None)


@contextmanager
def recording():
    out: list[torch.Tensor] = []
    token = _trace.set(out)
    try:
        yield out
    finally:
        _trace.reset(token)


def active() -> bool:
    return _trace.get() is not None


def note(*tensors: torch.Tensor) -> None:
    out = _trace.get()
    if out is not None:
        out.extend(t.detach().clone() for t in tensors)


def same(a: list[torch.Tensor], b: list[torch.Tensor]) -> bool:
    return len(a) == len(b) and all(x.shape == y.shape and torch.equal(x, y) for x, y in zip(a, b))
