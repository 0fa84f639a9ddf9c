"""Pre-norm transformer encoder with sinusoidal positions and a mean-pooled tanh head."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..tensor_core import RngStream, Tensor, dropout, relu, softmax, swapaxes, tanh
from ..tensor_core.nn import LayerNorm, Linear, Mode
from ..tensor_core.tensor import ShapeError
from .base import Forecaster


@dataclass(frozen=True)
class TransformerConfig:
    seq_len: int = 60
    n_features: int = 26
    d_model: int = 64
    n_heads: int = 8
    n_blocks: int = 2
    ffn: int = 256
    dropout: float = 0.1


def sinusoidal_encoding(length: int, width: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    div = np.exp(np.arange(0, width, 2) * (-math.log(10000.0) / width))
    pe = np.zeros((length, width))
    pe[:, 0::2] = np.sin(pos * div)
    pe[:, 1::2] = np.cos(pos * div[: width // 2])
    return pe


def scaled_dot_product_attention(q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
    """softmax(q k^T / sqrt(d_k)) v over the last two axes; returns (output, weights)."""
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"query width {q.shape[-1]} != key width {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"key length {k.shape[-2]} != value length {v.shape[-2]}")
    scores = (q @ swapaxes(k, -1, -2)) * (1.0 / math.sqrt(q.shape[-1]))
    weights = softmax(scores, axis=-1)
    return weights @ v, weights


@dataclass
class AttentionParams:
    q: Linear
    k: Linear
    v: Linear
    o: Linear

    @classmethod
    def init(cls, rng: RngStream, width: int) -> "AttentionParams":
        return cls(*(Linear.init(rng, width, width) for _ in range(4)))

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        for name in ("q", "k", "v", "o"):
            out.update(getattr(self, name).named_parameters(f"{prefix}.{name}"))
        return out


def multi_head_attention(x: Tensor, params: AttentionParams, heads: int = 8) -> tuple[Tensor, Tensor]:
    """Project, split into ``heads`` slices of width d/heads, attend, merge, project."""
    b, t, d = x.shape
    if d % heads:
        raise ShapeError(f"model width {d} is not divisible by {heads} heads")
    dk = d // heads

    def split(y: Tensor) -> Tensor:
        return y.reshape(b, t, heads, dk).transpose(0, 2, 1, 3)

    out, weights = scaled_dot_product_attention(split(params.q(x)), split(params.k(x)), split(params.v(x)))
    merged = out.transpose(0, 2, 1, 3).reshape(b, t, d)
    return params.o(merged), weights


@dataclass
class BlockParams:
    norm1: LayerNorm
    attn: AttentionParams
    norm2: LayerNorm
    ff1: Linear
    ff2: Linear

    @classmethod
    def init(cls, rng: RngStream, width: int, ffn: int) -> "BlockParams":
        return cls(
            LayerNorm.init(width),
            AttentionParams.init(rng, width),
            LayerNorm.init(width),
            Linear.init(rng, width, ffn),
            Linear.init(rng, ffn, width),
        )

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        for name in ("norm1", "attn", "norm2", "ff1", "ff2"):
            out.update(getattr(self, name).named_parameters(f"{prefix}.{name}"))
        return out


def feed_forward(x: Tensor, params: BlockParams) -> Tensor:
    return params.ff2(relu(params.ff1(x)))


def transformer_block(
    x: Tensor,
    params: BlockParams,
    rng: RngStream | None,
    mode: Mode,
    heads: int = 8,
    rate: float = 0.1,
) -> tuple[Tensor, Tensor]:
    """Pre-norm residual block; returns (output, attention weights)."""
    attn, weights = multi_head_attention(params.norm1(x), params.attn, heads)
    x = x + dropout(attn, rate, rng, mode)
    x = x + dropout(feed_forward(params.norm2(x), params), rate, rng, mode)
    return x, weights


class TransformerModel(Forecaster):
    kind = "transformer"

    def __init__(self, config: TransformerConfig, rng: RngStream):
        if config.d_model % config.n_heads:
            raise ShapeError(f"d_model {config.d_model} is not divisible by {config.n_heads} heads")
        super().__init__(config)
        self.proj = Linear.init(rng, config.n_features, config.d_model)
        self.blocks = [BlockParams.init(rng, config.d_model, config.ffn) for _ in range(config.n_blocks)]
        self.head = Linear.init(rng, config.d_model, 1)
        self.positions = sinusoidal_encoding(config.seq_len, config.d_model)
        self.last_attention: list[np.ndarray] = []
        self._register(self.proj.named_parameters("proj"))
        for i, blk in enumerate(self.blocks):
            self._register(blk.named_parameters(f"block{i}"))
        self._register(self.head.named_parameters("head"))

    def encode(self, inputs: Tensor, rng: RngStream | None, mode: Mode) -> Tensor:
        self.check_input(inputs)
        cfg = self.config
        x = self.proj(inputs) + Tensor(self.positions)
        self.last_attention = []
        for blk in self.blocks:
            x, w = transformer_block(x, blk, rng, mode, cfg.n_heads, cfg.dropout)
            self.last_attention.append(w.data)
        return x

    def forward(self, inputs: Tensor, rng: RngStream | None, mode: Mode) -> Tensor:
        pooled = self.encode(inputs, rng, mode).mean(axis=1)
        return tanh(self.head(pooled))
