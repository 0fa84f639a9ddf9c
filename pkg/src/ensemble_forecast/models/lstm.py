"""Stacked bidirectional LSTM with a linear, batch-norm, tanh output head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..tensor_core import RngStream, Tensor, concat, dropout, lstm_scan, sigmoid, stack, tanh
from ..tensor_core.nn import BatchNorm1d, Linear, Mode, full_param, glorot_uniform, zeros_param
from ..tensor_core.tensor import ShapeError
from .base import Forecaster

GATES = ("f", "i", "c", "o")


@dataclass(frozen=True)
class LstmConfig:
    seq_len: int = 60
    n_features: int = 26
    hidden: int = 128
    layers: int = 2
    dropout: float = 0.2


@dataclass
class GateParams:
    """Gate matrices of shape (H, H + D) acting on [h_prev, x_t], plus (H,) biases."""

    W_f: Tensor
    W_i: Tensor
    W_c: Tensor
    W_o: Tensor
    b_f: Tensor
    b_i: Tensor
    b_c: Tensor
    b_o: Tensor

    @classmethod
    def init(cls, rng: RngStream, n_in: int, hidden: int) -> "GateParams":
        ws = [glorot_uniform(rng, (hidden, hidden + n_in), hidden + n_in, hidden) for _ in GATES]
        return cls(*ws, full_param((hidden,), 1.0), zeros_param((hidden,)), zeros_param((hidden,)), zeros_param((hidden,)))

    @property
    def hidden(self) -> int:
        return self.W_f.shape[0]

    def weights(self) -> list[Tensor]:
        return [self.W_f, self.W_i, self.W_c, self.W_o]

    def biases(self) -> list[Tensor]:
        return [self.b_f, self.b_i, self.b_c, self.b_o]

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        out = {f"{prefix}.W_{g}": w for g, w in zip(GATES, self.weights())}
        out.update({f"{prefix}.b_{g}": b for g, b in zip(GATES, self.biases())})
        return out


def lstm_cell(x_t: Tensor, h_prev: Tensor, c_prev: Tensor, p: GateParams) -> tuple[Tensor, Tensor]:
    """One step, gates computed from the concatenation [h_prev, x_t]."""
    if h_prev.shape[-1] != p.hidden or x_t.shape[-1] + p.hidden != p.W_f.shape[1]:
        raise ShapeError(f"lstm_cell: x {x_t.shape}, h {h_prev.shape} do not fit W {p.W_f.shape}")
    hx = concat([h_prev, x_t], axis=-1)
    f = sigmoid(hx @ p.W_f.T + p.b_f)
    i = sigmoid(hx @ p.W_i.T + p.b_i)
    c_tilde = tanh(hx @ p.W_c.T + p.b_c)
    o = sigmoid(hx @ p.W_o.T + p.b_o)
    c = f * c_prev + i * c_tilde
    h = o * tanh(c)
    return h, c


def run_direction(x: Tensor, p: GateParams, reverse: bool, fused: bool = True) -> Tensor:
    """Hidden states for every step of a (batch, time, features) input, in input order."""
    if fused:
        return lstm_scan(x, p.weights(), p.biases(), reverse)
    b, t, _ = x.shape
    h = Tensor(np.zeros((b, p.hidden)))
    c = Tensor(np.zeros((b, p.hidden)))
    states: list = [None] * t
    for step in (range(t - 1, -1, -1) if reverse else range(t)):
        h, c = lstm_cell(x[:, step, :], h, c, p)
        states[step] = h
    return stack(states, axis=1)


class LstmModel(Forecaster):
    kind = "lstm"

    def __init__(self, config: LstmConfig, rng: RngStream):
        super().__init__(config)
        H = config.hidden
        self.layers: list[tuple[GateParams, GateParams]] = []
        n_in = config.n_features
        for k in range(config.layers):
            fwd, bwd = GateParams.init(rng, n_in, H), GateParams.init(rng, n_in, H)
            self.layers.append((fwd, bwd))
            self._register(fwd.named_parameters(f"layer{k}.fwd"))
            self._register(bwd.named_parameters(f"layer{k}.bwd"))
            n_in = 2 * H
        self.head = Linear.init(rng, 2 * H, 1)
        self.head_bn = BatchNorm1d.init(1)
        self._register(self.head.named_parameters("head"))
        self._register(self.head_bn.named_parameters("head_bn"))
        self.fused = True

    def named_buffers(self) -> dict[str, np.ndarray]:
        return self.head_bn.named_buffers("head_bn")

    def _set_buffer(self, name: str, value: np.ndarray) -> None:
        if name == "head_bn.running_mean":
            self.head_bn.state.running_mean = value
        elif name == "head_bn.running_var":
            self.head_bn.state.running_var = value
        else:
            raise KeyError(name)

    def hidden_states(self, inputs: Tensor, rng: RngStream | None, mode: Mode) -> list[tuple[Tensor, Tensor]]:
        """Per-layer (forward, backward) state sequences."""
        if inputs.ndim != 3 or inputs.shape[1] < 1:
            raise ShapeError(f"lstm expects (batch, time >= 1, features), got {inputs.shape}")
        x = inputs
        out = []
        for k, (fwd, bwd) in enumerate(self.layers):
            if k > 0:
                x = dropout(x, self.config.dropout, rng, mode)
            hf = run_direction(x, fwd, reverse=False, fused=self.fused)
            hb = run_direction(x, bwd, reverse=True, fused=self.fused)
            out.append((hf, hb))
            x = concat([hf, hb], axis=2)
        return out

    def forward(self, inputs: Tensor, rng: RngStream | None, mode: Mode) -> Tensor:
        self.check_input(inputs)
        hf, hb = self.hidden_states(inputs, rng, mode)[-1]
        last = concat([hf[:, -1, :], hb[:, 0, :]], axis=1)
        return tanh(self.head_bn(self.head(last), mode))
