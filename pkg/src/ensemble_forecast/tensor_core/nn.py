"""Fused and composite layers: layer norm, batch norm, dropout, the LSTM scan, init."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np

from .rng import RngStream
from .tensor import Tensor, ShapeError, _make, as_tensor, mul, sqrt

Mode = Literal["train", "infer"]

LN_EPS = 1e-5
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _check_mode(mode: str) -> None:
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")


# ---------------------------------------------------------------- init


def glorot_uniform(rng: RngStream, shape: tuple[int, ...], fan_in: int, fan_out: int) -> Tensor:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, shape), requires_grad=True)


def zeros_param(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def full_param(shape, value: float) -> Tensor:
    return Tensor(np.full(shape, float(value)), requires_grad=True)


# ---------------------------------------------------------------- linear


@dataclass
class Linear:
    weight: Tensor  # (in, out)
    bias: Tensor  # (out,)

    @classmethod
    def init(cls, rng: RngStream, n_in: int, n_out: int) -> "Linear":
        return cls(glorot_uniform(rng, (n_in, n_out), n_in, n_out), zeros_param((n_out,)))

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}


# ---------------------------------------------------------------- layer norm


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalize over the last axis (population variance), then scale and shift."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if x.shape[-1] < 1:
        raise ShapeError("layer_norm over an empty axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    lead = tuple(range(x.ndim - 1))

    def bw(g):
        gx = None
        if x.requires_grad:
            dxhat = g * gain.data
            gx = inv * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        ggain = (g * xhat).sum(axis=lead) if gain.requires_grad else None
        gbias = g.sum(axis=lead) if bias.requires_grad else None
        return gx, ggain, gbias

    return _make(xhat * gain.data + bias.data, (x, gain, bias), bw, "layer_norm")


@dataclass
class LayerNorm:
    gain: Tensor
    bias: Tensor

    @classmethod
    def init(cls, width: int) -> "LayerNorm":
        return cls(full_param((width,), 1.0), zeros_param((width,)))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias)

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.gain": self.gain, f"{prefix}.bias": self.bias}


# ---------------------------------------------------------------- batch norm


@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    @classmethod
    def init(cls, width: int) -> "BatchNormState":
        return cls(np.zeros(width), np.ones(width))


def batch_norm_1d(
    x: Tensor, gain: Tensor, bias: Tensor, state: BatchNormState, mode: Mode
) -> Tensor:
    """Batch norm over axis 0 of a (batch, features) tensor.

    Train mode normalizes with the batch mean and population variance and
    folds both into the running statistics; infer mode uses only the running
    statistics and leaves ``state`` untouched.
    """
    _check_mode(mode)
    if x.ndim != 2:
        raise ShapeError(f"batch_norm_1d expects (batch, features), got {x.shape}")
    if mode == "infer":
        scale = gain.data / np.sqrt(state.running_var + state.eps)
        shift = bias.data - state.running_mean * scale
        return x * Tensor(scale) + Tensor(shift)
    if x.shape[0] < 2:
        raise ShapeError("batch_norm_1d in train mode needs batch size >= 2")
    mu = x.mean(axis=0, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=0, keepdims=True)
    out = centered / sqrt(var + state.eps) * gain + bias
    m = state.momentum
    state.running_mean = (1.0 - m) * state.running_mean + m * mu.data[0]
    state.running_var = (1.0 - m) * state.running_var + m * var.data[0]
    return out


@dataclass
class BatchNorm1d:
    gain: Tensor
    bias: Tensor
    state: BatchNormState

    @classmethod
    def init(cls, width: int) -> "BatchNorm1d":
        return cls(full_param((width,), 1.0), zeros_param((width,)), BatchNormState.init(width))

    def __call__(self, x: Tensor, mode: Mode) -> Tensor:
        return batch_norm_1d(x, self.gain, self.bias, self.state, mode)

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.gain": self.gain, f"{prefix}.bias": self.bias}

    def named_buffers(self, prefix: str) -> dict[str, np.ndarray]:
        return {
            f"{prefix}.running_mean": self.state.running_mean,
            f"{prefix}.running_var": self.state.running_var,
        }


# ---------------------------------------------------------------- dropout


def dropout(x: Tensor, rate: float, rng: RngStream | None, mode: Mode) -> Tensor:
    """Inverted dropout; the identity in infer mode or at rate 0."""
    _check_mode(mode)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if mode == "infer" or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    keep = rng.random(x.shape) >= rate
    return mul(x, Tensor(keep / (1.0 - rate)))


# ---------------------------------------------------------------- lstm scan


def lstm_scan(
    x: Tensor,
    weights: Sequence[Tensor],
    biases: Sequence[Tensor],
    reverse: bool = False,
) -> Tensor:
    """Run one LSTM direction over a (batch, time, features) input.

    ``weights`` are the forget, input, candidate and output gate matrices, each
    of shape (H, H + D) acting on the concatenation [h_prev, x_t]; ``biases``
    are the matching (H,) vectors. State starts at zero. Returns the hidden
    state at every step, shape (batch, time, H), in the input's time order
    even when ``reverse`` is set.

    The gradient is a hand-written backprop through time over the whole
    sequence, so the graph gets one node instead of a few dozen per step.
    """
    if len(weights) != 4 or len(biases) != 4:
        raise ShapeError("lstm_scan needs four gate weights and four biases")
    if x.ndim != 3:
        raise ShapeError(f"lstm_scan expects (batch, time, features), got {x.shape}")
    B, T, D = x.shape
    H = weights[0].shape[0]
    for w, b in zip(weights, biases):
        if w.shape != (H, H + D) or b.shape != (H,):
            raise ShapeError(f"gate shapes {w.shape}/{b.shape} do not fit H={H}, D={D}")

    # Gate-major layout (gate, time, batch, H) keeps every per-step block
    # contiguous. Internal gate order is f, i, o, c~. Sigmoid rows are
    # pre-scaled by 1/2 so one tanh serves all four gates:
    # sigmoid(z) = (1 + tanh(z/2)) / 2.
    order = (0, 1, 3, 2)
    scale = np.array([0.5, 0.5, 0.5, 1.0])[:, None, None]
    W = np.stack([weights[k].data for k in order])  # (4, H, H+D)
    Wh, Wx = W[:, :, :H], W[:, :, H:]
    b = np.stack([biases[k].data for k in order])  # (4, H)
    A = np.ascontiguousarray(Wh.transpose(0, 2, 1) * scale.transpose(0, 2, 1))  # (4, H, H)

    xs = x.data[:, ::-1] if reverse else x.data
    xs = np.ascontiguousarray(xs.transpose(1, 0, 2)).reshape(T * B, D)  # time-major rows
    G = np.matmul(xs, (Wx * scale).transpose(0, 2, 1)).reshape(4, T, B, H)
    G += (b[:, None, None, :] * scale[..., None])
    hs = np.zeros((T + 1, B, H))
    cs = np.zeros((T + 1, B, H))
    tanh_c = np.empty((T, B, H))
    rec = np.empty((4, B, H))
    tmp = np.empty((B, H))
    for t in range(T):
        g = G[:, t]
        np.matmul(hs[t], A, out=rec)
        g += rec
        np.tanh(g, out=g)
        sg = g[:3]
        sg *= 0.5
        sg += 0.5
        np.multiply(g[0], cs[t], out=cs[t + 1])
        np.multiply(g[1], g[3], out=tmp)
        cs[t + 1] += tmp
        np.tanh(cs[t + 1], out=tanh_c[t])
        np.multiply(g[2], tanh_c[t], out=hs[t + 1])

    out = hs[1:].transpose(1, 0, 2)
    if reverse:
        out = out[:, ::-1]
    out = np.ascontiguousarray(out)

    def bw(gout):
        gs = gout[:, ::-1] if reverse else gout
        gs = np.ascontiguousarray(gs.transpose(1, 0, 2))
        dz = np.empty((4, T, B, H))
        dh = np.empty((B, H))
        dc = np.zeros((B, H))
        t1 = np.empty((B, H))
        t2 = np.empty((B, H))
        back = np.empty((4, B, H))
        dh_rec = np.zeros((B, H))
        WhK = np.ascontiguousarray(Wh)  # (4, H, H): dh_prev = sum_k dz_k @ Wh_k
        for t in range(T - 1, -1, -1):
            f, i, o, g = G[0, t], G[1, t], G[2, t], G[3, t]
            tc = tanh_c[t]
            np.add(gs[t], dh_rec, out=dh)
            # output gate
            d = dz[2, t]
            np.multiply(dh, tc, out=d)
            np.multiply(o, o, out=t1)
            np.subtract(o, t1, out=t1)
            d *= t1
            # cell state
            np.multiply(tc, tc, out=t1)
            np.subtract(1.0, t1, out=t1)
            t1 *= o
            t1 *= dh
            dc += t1
            # forget gate
            d = dz[0, t]
            np.multiply(dc, cs[t], out=d)
            np.multiply(f, f, out=t1)
            np.subtract(f, t1, out=t1)
            d *= t1
            # input gate
            d = dz[1, t]
            np.multiply(dc, g, out=d)
            np.multiply(i, i, out=t1)
            np.subtract(i, t1, out=t1)
            d *= t1
            # candidate
            d = dz[3, t]
            np.multiply(g, g, out=t2)
            np.subtract(1.0, t2, out=t2)
            t2 *= i
            np.multiply(dc, t2, out=d)
            dc *= f
            np.matmul(dz[:, t], WhK, out=back)
            np.add(back[0], back[1], out=dh_rec)
            dh_rec += back[2]
            dh_rec += back[3]
        flat = dz.reshape(4, T * B, H)
        flatT = flat.transpose(0, 2, 1)
        dWh = np.matmul(flatT, hs[:-1].reshape(T * B, H))  # (4, H, H)
        dWx = np.matmul(flatT, xs)  # (4, H, D)
        db = flat.sum(axis=1)
        gx = None
        if x.requires_grad:
            gx = np.matmul(flat, np.ascontiguousarray(Wx)).sum(axis=0).reshape(T, B, D).transpose(1, 0, 2)
            if reverse:
                gx = gx[:, ::-1]
        # internal index of each caller gate (f, i, c~, o)
        idx = (0, 1, 3, 2)
        return (
            (gx,)
            + tuple(np.concatenate([dWh[j], dWx[j]], axis=1) for j in idx)
            + tuple(db[j] for j in idx)
        )

    return _make(out, (x, *weights, *biases), bw, "lstm_scan")
