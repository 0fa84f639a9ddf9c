"""Weighted averaging of the three member forecasts and inverse-error reweighting."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

MEMBERS = ("vae", "transformer", "lstm")
WEIGHT_FLOOR = 0.05
EPS = 1e-8


@dataclass(frozen=True)
class EnsembleWeights:
    w_vae: float
    w_transformer: float
    w_lstm: float

    def __post_init__(self):
        ws = self.as_tuple()
        if min(ws) < 0 or abs(sum(ws) - 1.0) > 1e-12:
            raise ValueError(f"weights must be non-negative and sum to 1, got {ws}")

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.w_vae, self.w_transformer, self.w_lstm)

    def to_dict(self) -> dict[str, float]:
        return dict(zip(MEMBERS, self.as_tuple()))

    @classmethod
    def from_dict(cls, d: dict) -> "EnsembleWeights":
        return cls(*(float(d[m]) for m in MEMBERS))


def init_weights() -> EnsembleWeights:
    return EnsembleWeights(0.3, 0.3, 0.4)


def combine(preds: Sequence[np.ndarray], weights: EnsembleWeights) -> np.ndarray:
    """Element-wise w1*y_vae + w2*y_transformer + w3*y_lstm."""
    if len(preds) != 3:
        raise ValueError(f"expected three prediction series, got {len(preds)}")
    arrs = [np.asarray(p, dtype=np.float64) for p in preds]
    if not (arrs[0].shape == arrs[1].shape == arrs[2].shape):
        raise ValueError(f"prediction lengths differ: {[a.shape for a in arrs]}")
    w1, w2, w3 = weights.as_tuple()
    return w1 * arrs[0] + w2 * arrs[1] + w3 * arrs[2]


@dataclass
class PerformanceWindow:
    """Rolling record of per-model validation MAPE, oldest evicted first."""

    window_len: int = 5
    entries: deque = field(default_factory=deque)

    def __post_init__(self):
        if self.window_len < 1:
            raise ValueError("window_len must be >= 1")
        self.entries = deque(self.entries, maxlen=self.window_len)

    def __len__(self) -> int:
        return len(self.entries)

    def mean(self) -> np.ndarray:
        if not self.entries:
            raise ValueError("performance window is empty")
        return np.mean(np.array(self.entries), axis=0)


def record_validation(window: PerformanceWindow, per_model_mape: Sequence[float]) -> PerformanceWindow:
    vals = tuple(float(v) for v in per_model_mape)
    if len(vals) != 3:
        raise ValueError(f"expected three MAPE values, got {len(vals)}")
    if any(not v >= 0 for v in vals):
        raise ValueError(f"MAPE values must be non-negative, got {vals}")
    window.entries.append(vals)
    return window


def _floor_to_simplex(raw: np.ndarray, floor: float) -> np.ndarray:
    """Closest point with every weight >= floor: pin the low ones, rescale the rest."""
    w = raw / raw.sum()
    pinned = np.zeros(len(w), dtype=bool)
    while True:
        free = ~pinned
        budget = 1.0 - floor * pinned.sum()
        w_free = raw[free] / raw[free].sum() * budget
        low = w_free < floor
        if not low.any():
            w = np.full(len(w), floor)
            w[free] = w_free
            return w
        idx = np.flatnonzero(free)[low]
        pinned[idx] = True


def update_weights(
    window: PerformanceWindow,
    current: EnsembleWeights | None = None,
    floor: float = WEIGHT_FLOOR,
) -> EnsembleWeights:
    """w_i proportional to 1 / (mean recent MAPE_i + eps), floored and renormalized.

    ``current`` is accepted for interface symmetry; the rule depends only on
    the window.
    """
    if floor * 3 > 1.0:
        raise ValueError(f"floor {floor} is infeasible for three weights")
    raw = 1.0 / (window.mean() + EPS)
    w = _floor_to_simplex(raw, floor)
    # exact simplex: put any rounding residue on the largest weight
    w[np.argmax(w)] += 1.0 - w.sum()
    return EnsembleWeights(*(float(v) for v in w))
