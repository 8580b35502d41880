"""
models.py - Unsupervised models whose per-sample losses feed the influence scores

- VaeModel: Gaussian encoder (mu, log sigma^2 heads), unit-variance Gaussian decoder,
  loss = Monte-Carlo reconstruction term + closed-form KL to N(0, I)
- DsvddModel: bias-free-output encoder pulled towards a fixed center c
- MlpModel: plain network under 1/2 squared error (autoencoder or supervised)

Each model exposes objective() (a numeric.Objective) for training and influence,
and baseline_scores() for its classical anomaly score (higher = more anomalous).
"""

import dataclasses
import hashlib
import json
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import Tensor

from errors import ConfigError, DataError, DomainError
from numeric import (
    DTYPE,
    FlatParams,
    LossKind,
    MlpSpec,
    MseObjective,
    Objective,
    ParamLayout,
    Rng,
    as_matrix,
    as_vector,
    check_finite,
    forward,
    gaussian_sample,
    init_params,
    layout_for,
    sample_losses,
)

logger = logging.getLogger(__name__)

CENTER_MIN_ABS = 0.1


class AnomalyModel(ABC):
    """Common surface used by training, influence and the CLI"""

    kind: str
    params: FlatParams

    @property
    @abstractmethod
    def input_dim(self) -> int:
        ...

    @abstractmethod
    def objective(self, mc_samples: Optional[int] = None) -> Objective:
        ...

    @abstractmethod
    def describe(self) -> Dict:
        """JSON-serializable description of everything that shapes the parameters"""

    @abstractmethod
    def baseline_scores(self, batch) -> np.ndarray:
        ...

    def with_params(self, params: FlatParams) -> "AnomalyModel":
        return dataclasses.replace(self, params=params)

    def fingerprint(self) -> bytes:
        """32-byte hash of the model description and parameter layout"""
        payload = json.dumps({"model": self.describe(), "layout": [list(map(str, s)) for s in self.params.layout]},
                             sort_keys=True)
        return hashlib.sha256(payload.encode("utf-8")).digest()


# =========================================================================
# VARIATIONAL AUTOENCODER
# =========================================================================

def _split_heads(head: Tensor, latent_dim: int) -> Tuple[Tensor, Tensor]:
    return head[..., :latent_dim], head[..., latent_dim:]


class VaeElbo(Objective):
    """
    Negative ELBO of one sample:
        (1/l) sum_s 1/2 ||x - dec(mu + sigma * eps_s)||^2 + KL(N(mu, sigma^2) || N(0, I))
    with the l draws eps_s passed in as noise of shape (l, latent_dim).
    """

    kind = LossKind.VAE_ELBO

    def __init__(self, encoder: MlpSpec, decoder: MlpSpec, mc_samples: int):
        self.encoder = encoder
        self.decoder = decoder
        self.mc_samples = mc_samples
        self.latent_dim = decoder.input_width
        self._n_encoder = encoder.n_tensors

    @property
    def layout(self) -> ParamLayout:
        return layout_for(self.encoder, self.decoder)

    @property
    def sample_width(self) -> int:
        return self.encoder.input_width

    def noise_shape(self) -> Tuple[int, int]:
        return (self.mc_samples, self.latent_dim)

    def __call__(self, tensors, x, noise):
        head = forward(self.encoder, tensors[: self._n_encoder], x)
        mu, log_var = _split_heads(head, self.latent_dim)
        sigma = torch.exp(0.5 * log_var)
        z = mu + sigma * noise
        recon = forward(self.decoder, tensors[self._n_encoder:], z)
        reconstruction = 0.5 * ((recon - x) ** 2).sum(dim=-1).mean()
        kl = 0.5 * (mu ** 2 + torch.exp(log_var) - 1.0 - log_var).sum()
        return reconstruction + kl


@dataclass(frozen=True, eq=False)
class VaeModel(AnomalyModel):
    encoder_spec: MlpSpec
    decoder_spec: MlpSpec
    params: FlatParams
    latent_dim: int
    mc_samples: int = 1

    kind = "vae"

    def __post_init__(self):
        if self.encoder_spec.output_width != 2 * self.latent_dim:
            raise ConfigError(f"encoder must emit 2 x latent_dim = {2 * self.latent_dim} values, "
                              f"got {self.encoder_spec.output_width}")
        if self.decoder_spec.input_width != self.latent_dim:
            raise ConfigError(f"decoder input width {self.decoder_spec.input_width} != latent_dim {self.latent_dim}")
        if self.decoder_spec.output_width != self.encoder_spec.input_width:
            raise ConfigError(f"decoder output width {self.decoder_spec.output_width} != "
                              f"data dimension {self.encoder_spec.input_width}")
        if self.mc_samples < 1:
            raise ConfigError(f"mc_samples must be >= 1, got {self.mc_samples}")
        if self.params.layout != layout_for(self.encoder_spec, self.decoder_spec):
            raise ConfigError("VAE parameters do not match the encoder/decoder layout")

    @classmethod
    def build(cls, input_dim: int, hidden_widths: Sequence[int], latent_dim: int, rng: Rng,
              mc_samples: int = 1, activation: str = "tanh") -> "VaeModel":
        """
        Encoder d -> hidden... -> 2 * latent_dim, decoder mirrors it back to d.

        Args:
            input_dim: data dimension d
            hidden_widths: encoder hidden widths (the decoder uses them reversed)
            latent_dim: size of z
            rng: drives the parameter initialization
            mc_samples: default number l of reparameterized draws per loss evaluation
            activation: hidden activation ("tanh" or "relu")
        """
        hidden = tuple(hidden_widths)
        encoder = MlpSpec(layer_widths=(input_dim, *hidden, 2 * latent_dim), activation=activation)
        decoder = MlpSpec(layer_widths=(latent_dim, *reversed(hidden), input_dim), activation=activation)
        params = init_params(rng, encoder, decoder)
        return cls(encoder, decoder, params, latent_dim, mc_samples)

    @property
    def input_dim(self) -> int:
        return self.encoder_spec.input_width

    def objective(self, mc_samples: Optional[int] = None) -> VaeElbo:
        return VaeElbo(self.encoder_spec, self.decoder_spec, mc_samples or self.mc_samples)

    def describe(self) -> Dict:
        return {
            "kind": self.kind,
            "encoder": self.encoder_spec.model_dump(),
            "decoder": self.decoder_spec.model_dump(),
            "latent_dim": self.latent_dim,
        }

    def split_params(self) -> Tuple[Sequence[Tensor], Sequence[Tensor]]:
        tensors = self.params.unflatten()
        n = self.encoder_spec.n_tensors
        return tensors[:n], tensors[n:]

    def baseline_scores(self, batch) -> np.ndarray:
        x = as_matrix(batch, self.input_dim)
        encoder, decoder = self.split_params()
        mu, _ = _split_heads(forward(self.encoder_spec, encoder, x), self.latent_dim)
        recon = forward(self.decoder_spec, decoder, mu)
        scores = ((x - recon) ** 2).sum(dim=1)
        check_finite(scores, "reconstruction score")
        return scores.numpy()


def vae_encode(model: VaeModel, x) -> Tuple[Tensor, Tensor]:
    """
    Posterior parameters of one sample (or of every row of a batch).

    Returns:
        (mu, sigma) with sigma = exp(log_var / 2) > 0
    """
    batch = torch.as_tensor(x, dtype=DTYPE)
    single = batch.ndim == 1
    batch = as_matrix(batch, model.input_dim)
    encoder, _ = model.split_params()
    head = forward(model.encoder_spec, encoder, batch)
    check_finite(head, "encoder output")
    mu, log_var = _split_heads(head, model.latent_dim)
    sigma = torch.exp(0.5 * log_var)
    if single:
        return mu[0], sigma[0]
    return mu, sigma


def kl_diag_gaussian(mu, sigma) -> float:
    """KL(N(mu, diag sigma^2) || N(0, I)) = 1/2 sum(mu^2 + sigma^2 - 1 - log sigma^2)"""
    mu = as_vector(mu)
    sigma = as_vector(sigma, mu.numel(), what="sigma")
    if (sigma <= 0).any():
        raise DomainError("sigma must be strictly positive")
    variance = sigma ** 2
    return float(0.5 * (mu ** 2 + variance - 1.0 - torch.log(variance)).sum())


def vae_loss(model: VaeModel, x, rng: Rng) -> float:
    """Negative ELBO of x, averaged over model.mc_samples draws taken from rng"""
    x = as_vector(x, model.input_dim)
    objective = model.objective()
    noise = gaussian_sample(rng, model.mc_samples, model.latent_dim)
    value = objective(model.params.unflatten(), x, noise)
    check_finite(value.reshape(1), "VAE loss")
    return float(value)


def reconstruction_score(model: VaeModel, x, rng: Optional[Rng] = None) -> float:
    """||x - dec(mu(x))||^2; decoding the posterior mean keeps it deterministic, rng is unused"""
    return float(model.baseline_scores(as_vector(x, model.input_dim).reshape(1, -1))[0])


# =========================================================================
# DEEP SVDD
# =========================================================================

class DsvddObjective(Objective):
    """||f(x) - c||^2 with c held constant"""

    kind = LossKind.DSVDD

    def __init__(self, spec: MlpSpec, center: Tensor):
        self.spec = spec
        self.center = center

    @property
    def layout(self) -> ParamLayout:
        return layout_for(self.spec)

    @property
    def sample_width(self) -> int:
        return self.spec.input_width

    def __call__(self, tensors, x, noise=None):
        return ((forward(self.spec, tensors, x) - self.center) ** 2).sum()


@dataclass(frozen=True, eq=False)
class DsvddModel(AnomalyModel):
    encoder_spec: MlpSpec
    params: FlatParams
    center: Optional[Tensor] = None

    kind = "dsvdd"

    def __post_init__(self):
        if self.encoder_spec.final_bias:
            raise ConfigError("Deep SVDD encoder must not have a bias in its final layer")
        if self.params.layout != layout_for(self.encoder_spec):
            raise ConfigError("Deep SVDD parameters do not match the encoder layout")
        if self.center is not None and self.center.numel() != self.encoder_spec.output_width:
            raise ConfigError(f"center has {self.center.numel()} coordinates, "
                              f"encoder emits {self.encoder_spec.output_width}")

    @classmethod
    def build(cls, input_dim: int, hidden_widths: Sequence[int], latent_dim: int, rng: Rng,
              activation: str = "tanh") -> "DsvddModel":
        spec = MlpSpec(layer_widths=(input_dim, *hidden_widths, latent_dim), activation=activation,
                       final_bias=False)
        return cls(spec, init_params(rng, spec))

    @property
    def input_dim(self) -> int:
        return self.encoder_spec.input_width

    def with_center(self, center: Tensor) -> "DsvddModel":
        return dataclasses.replace(self, center=as_vector(center, self.encoder_spec.output_width, "center"))

    def objective(self, mc_samples: Optional[int] = None) -> DsvddObjective:
        if self.center is None:
            raise ConfigError("Deep SVDD center is not initialized; call dsvdd_center_init first")
        return DsvddObjective(self.encoder_spec, self.center)

    def describe(self) -> Dict:
        return {
            "kind": self.kind,
            "encoder": self.encoder_spec.model_dump(),
            "center": None if self.center is None else self.center.tolist(),
        }

    def baseline_scores(self, batch) -> np.ndarray:
        scores = sample_losses(self.objective(), self.params, as_matrix(batch, self.input_dim))
        check_finite(scores, "Deep SVDD score")
        return scores.numpy()


def dsvdd_center_init(model: DsvddModel, train) -> Tensor:
    """
    Mean encoder output over the training set at the current parameters.

    Coordinates with |c_j| < 0.1 are pushed to +-0.1 (sign kept, zero goes to +0.1)
    so the trivial all-zero solution stays out of reach.
    """
    x = as_matrix(train, model.input_dim, what="train set")
    if x.shape[0] == 0:
        raise DataError("cannot initialize the Deep SVDD center from an empty train set")
    out = forward(model.encoder_spec, model.params.unflatten(), x)
    check_finite(out, "encoder output")
    center = out.mean(dim=0)
    small = center.abs() < CENTER_MIN_ABS
    ones = torch.ones_like(center)
    sign = torch.where(center < 0, -ones, ones)
    center = torch.where(small, sign * CENTER_MIN_ABS, center)
    logger.info(f"🎯 Deep SVDD center initialized ({int(small.sum())}/{center.numel()} coordinates clamped)")
    return center


def dsvdd_loss(model: DsvddModel, x) -> float:
    """||f(x) - c||^2, also the plain Deep SVDD anomaly score"""
    x = as_vector(x, model.input_dim)
    return float(model.objective()(model.params.unflatten(), x, None))


# =========================================================================
# PLAIN MLP (squared error)
# =========================================================================

@dataclass(frozen=True, eq=False)
class MlpModel(AnomalyModel):
    spec: MlpSpec
    params: FlatParams
    split_target: bool = False

    kind = "mlp"

    def __post_init__(self):
        if self.params.layout != layout_for(self.spec):
            raise ConfigError("MLP parameters do not match the network layout")
        MseObjective(self.spec, self.split_target)

    @classmethod
    def build(cls, spec: MlpSpec, rng: Rng, split_target: bool = False) -> "MlpModel":
        return cls(spec, init_params(rng, spec), split_target)

    @property
    def input_dim(self) -> int:
        return self.objective().sample_width

    def objective(self, mc_samples: Optional[int] = None) -> MseObjective:
        return MseObjective(self.spec, self.split_target)

    def describe(self) -> Dict:
        return {"kind": self.kind, "spec": self.spec.model_dump(), "split_target": self.split_target}

    def baseline_scores(self, batch) -> np.ndarray:
        scores = sample_losses(self.objective(), self.params, as_matrix(batch, self.input_dim))
        return (2.0 * scores).numpy()


def build_model(kind: str, input_dim: int, hidden_widths: Sequence[int], latent_dim: int, rng: Rng,
                mc_samples: int = 1, activation: str = "tanh") -> AnomalyModel:
    """Factory used by the CLI; the Deep SVDD center is initialized separately (needs the train set)"""
    if kind == "vae":
        return VaeModel.build(input_dim, hidden_widths, latent_dim, rng, mc_samples, activation)
    if kind == "dsvdd":
        return DsvddModel.build(input_dim, hidden_widths, latent_dim, rng, activation)
    raise ConfigError(f"unknown model kind {kind!r} (expected vae or dsvdd)")
