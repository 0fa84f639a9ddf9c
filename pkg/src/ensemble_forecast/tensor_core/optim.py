from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from ..errors import NumericFault
from .tensor import ShapeError, Tensor


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "AdamState":
        return AdamState(self.step, {k: a.copy() for k, a in self.m.items()}, {k: a.copy() for k, a in self.v.items()})


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update. Pure: inputs are not modified."""
    if set(params) != set(grads):
        raise ShapeError("params and grads name different tensors")
    step = state.step + 1
    c1 = 1.0 - beta1**step
    c2 = 1.0 - beta2**step
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"grad shape {g.shape} != param shape {p.shape} for {name}")
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        if m.shape != p.shape or v.shape != p.shape:
            raise ShapeError(f"optimizer state shape mismatch for {name}")
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        new_params[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(step, new_m, new_v)


def grad_norm(tensors: Mapping[str, Tensor]) -> float:
    return math.sqrt(sum(float((t.grad**2).sum()) for t in tensors.values() if t.grad is not None))


def clip_grad_norm(tensors: Mapping[str, Tensor], max_norm: float = 5.0) -> float:
    """Scale all grads so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    total = grad_norm(tensors)
    if total > max_norm:
        scale = max_norm / total
        for t in tensors.values():
            if t.grad is not None:
                t.grad = t.grad * scale
    return total


class Adam:
    """Adam over named parameter tensors, with optional global-norm clipping."""

    def __init__(
        self,
        params: Mapping[str, Tensor],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        clip_norm: float | None = 5.0,
    ):
        self.params = dict(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.state = AdamState()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> float:
        """Apply one update; returns the pre-clip gradient norm. Non-finite gradients raise NumericFault."""
        norm = clip_grad_norm(self.params, self.clip_norm) if self.clip_norm else grad_norm(self.params)
        if not math.isfinite(norm):
            raise NumericFault("non-finite gradient")
        arrays = {k: p.data for k, p in self.params.items()}
        grads = {k: p.grad if p.grad is not None else np.zeros_like(p.data) for k, p in self.params.items()}
        new, self.state = adam_step(arrays, grads, self.state, self.lr, *self.betas, self.eps)
        for k, p in self.params.items():
            p.data = new[k]
        return norm
