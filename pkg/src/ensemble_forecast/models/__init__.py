"""The three ensemble members and a factory keyed by member name."""

from __future__ import annotations

from ..errors import SchemaError
from ..tensor_core import RngStream, Tensor
from .base import Forecaster, WindowBatch
from .lstm import GateParams, LstmConfig, LstmModel, lstm_cell, run_direction
from .transformer import (
    AttentionParams,
    BlockParams,
    TransformerConfig,
    TransformerModel,
    feed_forward,
    multi_head_attention,
    scaled_dot_product_attention,
    sinusoidal_encoding,
    transformer_block,
)
from .vae import VaeConfig, VaeModel, VaeOutput, kl_divergence, vae_forward, vae_loss

MODEL_NAMES = ("vae", "transformer", "lstm")

_REGISTRY = {
    "vae": (VaeConfig, VaeModel),
    "transformer": (TransformerConfig, TransformerModel),
    "lstm": (LstmConfig, LstmModel),
}


def build_model(kind: str, seq_len: int, n_features: int, rng: RngStream, **overrides) -> Forecaster:
    try:
        config_cls, model_cls = _REGISTRY[kind]
    except KeyError:
        raise ValueError(f"unknown model {kind!r}; expected one of {MODEL_NAMES}") from None
    return model_cls(config_cls(seq_len=seq_len, n_features=n_features, **overrides), rng)


def config_from_dict(kind: str, values: dict):
    return _REGISTRY[kind][0](**values)


def config_fields(kind: str) -> set[str]:
    return set(_REGISTRY[kind][0].__dataclass_fields__)


def model_from_hyperparameters(kind: str, values: dict, rng: RngStream | None = None) -> Forecaster:
    """Rebuild a member from its saved hyperparameters; weights come from a checkpoint."""
    try:
        config = config_from_dict(kind, values)
    except (KeyError, TypeError) as exc:
        raise SchemaError(f"bad {kind} hyperparameters: {exc}") from None
    return _REGISTRY[kind][1](config, rng or RngStream(0))


def transformer_forward(model: TransformerModel, batch: WindowBatch, rng, mode):
    return model.forward(Tensor(batch.inputs), rng, mode)


def lstm_forward(model: LstmModel, batch: WindowBatch, rng, mode):
    return model.forward(Tensor(batch.inputs), rng, mode)
