from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Any

import numpy as np

from ..errors import SchemaError
from ..tensor_core import RngStream, Tensor, mse, no_grad
from ..tensor_core.nn import Mode


@dataclass(frozen=True)
class WindowBatch:
    """Scaled input windows (batch, time, features) and next-step targets (batch, 1)."""

    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        if self.inputs.ndim != 3:
            raise ValueError(f"inputs must be (batch, time, features), got {self.inputs.shape}")
        if self.targets.shape != (self.inputs.shape[0], 1):
            raise ValueError(f"targets must be ({self.inputs.shape[0]}, 1), got {self.targets.shape}")

    def __len__(self) -> int:
        return self.inputs.shape[0]


class Forecaster:
    """Shared plumbing: parameter registry, state dicts, loss and inference helpers."""

    kind: str = ""

    def __init__(self, config):
        self.config = config
        self._params: dict[str, Tensor] = {}
        self._buffers: dict[str, Any] = {}

    def _register(self, named: dict[str, Tensor]) -> None:
        self._params.update(named)

    def named_parameters(self) -> dict[str, Tensor]:
        return dict(self._params)

    def named_buffers(self) -> dict[str, np.ndarray]:
        return {}

    def _set_buffer(self, name: str, value: np.ndarray) -> None:
        raise KeyError(name)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {k: p.data.copy() for k, p in self._params.items()}
        state.update({k: np.array(v, copy=True) for k, v in self.named_buffers().items()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        expected = set(self._params) | set(self.named_buffers())
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise SchemaError(f"{self.kind} state mismatch: missing {missing}, unexpected {extra}")
        for k, p in self._params.items():
            if state[k].shape != p.shape:
                raise SchemaError(f"{self.kind} tensor {k}: shape {state[k].shape} != {p.shape}")
            p.data = np.array(state[k], dtype=np.float64)
        for k in self.named_buffers():
            self._set_buffer(k, np.array(state[k], dtype=np.float64))

    def hyperparameters(self) -> dict:
        return asdict(self.config)

    # subclasses implement forward(inputs, rng, mode) -> Tensor (batch, 1)

    def forward(self, inputs: Tensor, rng: RngStream | None, mode: Mode) -> Tensor:
        raise NotImplementedError

    def loss(self, batch: WindowBatch, rng: RngStream | None, mode: Mode = "train") -> Tensor:
        pred = self.forward(Tensor(batch.inputs), rng, mode)
        return mse(pred, Tensor(batch.targets))

    def predict(self, inputs: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Infer-mode predictions, shape (n,)."""
        out = []
        with no_grad():
            for s in range(0, inputs.shape[0], batch_size):
                out.append(self.forward(Tensor(inputs[s : s + batch_size]), None, "infer").data[:, 0])
        return np.concatenate(out) if out else np.zeros(0)

    def validate(self, batch: WindowBatch) -> tuple[float, np.ndarray]:
        """Infer-mode loss and predictions (n,) from one pass, without building a graph."""
        with no_grad():
            pred = self.forward(Tensor(batch.inputs), None, "infer")
            loss = mse(pred, Tensor(batch.targets))
        return float(loss.data), pred.data[:, 0].copy()

    def check_input(self, inputs: Tensor) -> None:
        cfg = self.config
        if inputs.ndim != 3 or inputs.shape[1:] != (cfg.seq_len, cfg.n_features):
            raise SchemaError(
                f"{self.kind} expects windows of shape (batch, {cfg.seq_len}, {cfg.n_features}), got {inputs.shape}"
            )
