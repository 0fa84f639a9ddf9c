"""Variational autoencoder over flattened windows, with a regression head on the latent mean."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from ..tensor_core import RngStream, Tensor, exp, mse, no_grad, tanh
from ..tensor_core.nn import Linear, Mode
from .base import Forecaster, WindowBatch


@dataclass(frozen=True)
class VaeConfig:
    seq_len: int = 60
    n_features: int = 26
    hidden: int = 64
    latent: int = 16
    beta: float = 0.5
    lambda_pred: float = 1.0


class VaeOutput(NamedTuple):
    prediction: Tensor
    reconstruction: Tensor
    mu: Tensor
    logvar: Tensor


def kl_divergence(mu: Tensor, logvar: Tensor) -> Tensor:
    """KL(N(mu, exp(logvar)) || N(0, 1)) summed over latent units, averaged over the batch."""
    per_unit = mu * mu + exp(logvar) - 1.0 - logvar
    return per_unit.sum(axis=-1).mean() * 0.5


def vae_loss(
    x: Tensor,
    x_hat: Tensor,
    mu: Tensor,
    logvar: Tensor,
    prediction: Tensor,
    target: Tensor,
    beta: float = 0.5,
    lambda_pred: float = 1.0,
) -> Tensor:
    if x.shape != x_hat.shape or prediction.shape != target.shape or mu.shape != logvar.shape:
        raise ValueError("vae_loss shape mismatch")
    return mse(x_hat, x) + kl_divergence(mu, logvar) * beta + mse(prediction, target) * lambda_pred


class VaeModel(Forecaster):
    kind = "vae"

    def __init__(self, config: VaeConfig, rng: RngStream):
        super().__init__(config)
        flat = config.seq_len * config.n_features
        self.enc = Linear.init(rng, flat, config.hidden)
        self.enc_mu = Linear.init(rng, config.hidden, config.latent)
        self.enc_logvar = Linear.init(rng, config.hidden, config.latent)
        self.dec_hidden = Linear.init(rng, config.latent, config.hidden)
        self.dec_out = Linear.init(rng, config.hidden, flat)
        self.head = Linear.init(rng, config.latent, 1)
        for name in ("enc", "enc_mu", "enc_logvar", "dec_hidden", "dec_out", "head"):
            self._register(getattr(self, name).named_parameters(name))

    def encode(self, flat: Tensor) -> tuple[Tensor, Tensor]:
        h = tanh(self.enc(flat))
        return self.enc_mu(h), self.enc_logvar(h)

    def decode(self, z: Tensor) -> Tensor:
        return self.dec_out(tanh(self.dec_hidden(z)))

    def run(
        self,
        inputs: Tensor,
        rng: RngStream | None,
        mode: Mode,
        eps: Optional[np.ndarray] = None,
    ) -> VaeOutput:
        """Full pass. ``eps`` overrides the train-mode noise draw."""
        self.check_input(inputs)
        flat = inputs.reshape(inputs.shape[0], -1)
        mu, logvar = self.encode(flat)
        if mode == "train":
            if eps is None:
                if rng is None:
                    raise ValueError("train mode needs an rng for the latent noise")
                eps = rng.normal(mu.shape)
            z = mu + exp(logvar * 0.5) * Tensor(eps)
        elif mode == "infer":
            z = mu
        else:
            raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
        return VaeOutput(tanh(self.head(mu)), self.decode(z), mu, logvar)

    def forward(self, inputs: Tensor, rng: RngStream | None, mode: Mode) -> Tensor:
        if mode == "infer":
            self.check_input(inputs)
            mu, _ = self.encode(inputs.reshape(inputs.shape[0], -1))
            return tanh(self.head(mu))
        return self.run(inputs, rng, mode).prediction

    def loss(self, batch: WindowBatch, rng: RngStream | None, mode: Mode = "train", eps=None) -> Tensor:
        x = Tensor(batch.inputs)
        out = self.run(x, rng, mode, eps)
        flat = x.reshape(x.shape[0], -1)
        cfg = self.config
        return vae_loss(flat, out.reconstruction, out.mu, out.logvar, out.prediction, Tensor(batch.targets), cfg.beta, cfg.lambda_pred)

    def validate(self, batch: WindowBatch) -> tuple[float, np.ndarray]:
        with no_grad():
            x = Tensor(batch.inputs)
            out = self.run(x, None, "infer")
            cfg = self.config
            loss = vae_loss(
                x.reshape(x.shape[0], -1), out.reconstruction, out.mu, out.logvar,
                out.prediction, Tensor(batch.targets), cfg.beta, cfg.lambda_pred,
            )
        return float(loss.data), out.prediction.data[:, 0].copy()


def vae_forward(model: VaeModel, batch: WindowBatch, rng: RngStream | None, mode: Mode, eps=None) -> VaeOutput:
    return model.run(Tensor(batch.inputs), rng, mode, eps)
