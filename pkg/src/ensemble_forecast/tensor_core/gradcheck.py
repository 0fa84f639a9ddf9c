from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .tensor import Tensor, backward


@dataclass
class GradCheckResult:
    errors: dict[str, float]
    checked: int

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def worst(self) -> tuple[str, float]:
        name = max(self.errors, key=self.errors.get)
        return name, self.errors[name]


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-5) -> float:
    """Norm-wise ``|a - n| / max(|a|, |n|, floor)``."""
    diff = float(np.linalg.norm(analytic - numeric))
    scale = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)), floor)
    return diff / scale


def gradcheck(
    fn: Callable[[], Tensor],
    inputs: Mapping[str, Tensor],
    h: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckResult:
    """Compare backprop gradients of ``fn()`` with central differences.

    ``fn`` must be deterministic (rebuild any dropout rng inside it). With
    ``max_coords`` only that many randomly chosen entries per input are
    perturbed.
    """
    for t in inputs.values():
        t.grad = None
    backward(fn())
    rng = rng or np.random.default_rng(0)
    errors: dict[str, float] = {}
    checked = 0
    for name, t in inputs.items():
        analytic_full = t.grad if t.grad is not None else np.zeros_like(t.data)
        t.data = np.ascontiguousarray(t.data)
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = rng.choice(flat.size, size=max_coords, replace=False)
        numeric = np.empty(len(idx))
        for k, j in enumerate(idx):
            orig = flat[j]
            flat[j] = orig + h
            up = fn().item()
            flat[j] = orig - h
            down = fn().item()
            flat[j] = orig
            numeric[k] = (up - down) / (2 * h)
        errors[name] = relative_error(analytic_full.reshape(-1)[idx], numeric)
        checked += len(idx)
    for t in inputs.values():
        t.grad = None
    return GradCheckResult(errors, checked)
