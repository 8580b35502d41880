"""
influence.py - TracInCP influence and the TracInAD anomaly score

TracInCP(x, x') = sum_i lr_i * grad l(theta_i, x') . grad l(theta_i, x)   over checkpoints i
TracInAD(x')    = mean over a random train subsample B of TracInCP(x, x')

Training points mostly help normal points and barely help (or hurt) anomalies,
so a LOW mean influence flags an anomaly; InfluenceResult.anomaly_scores is the
negated mean influence so that higher = more anomalous, like every other scorer.

Monte-Carlo draws for VAE gradients are keyed by (seed, checkpoint epoch,
sample bytes): a sample sees the same draws at a given checkpoint no matter
which function, batch or thread computes its gradient.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field
from torch import Tensor
from tqdm import tqdm

from errors import ConfigError, DataError, IncompatibleCheckpointError
from models import AnomalyModel
from numeric import (
    DTYPE,
    FlatParams,
    Objective,
    Rng,
    as_matrix,
    as_vector,
    batch_gradients,
    derive_seed,
    grad_dot,
    per_sample_gradient,
    sample_losses,
)
from training import CheckpointStore, TrainConfig, train

logger = logging.getLogger(__name__)

LOO_MAX_ROWS = 50


class InfluenceConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    subsample_size: int = Field(ge=1)
    resample_per_checkpoint: bool = False
    mc_loss_samples: int = Field(default=1, ge=1)
    seed: int = Field(default=0, ge=0)
    chunk_size: int = Field(default=4096, ge=1)


@dataclass
class InfluenceResult:
    """Mean influence per validation row (higher = more normal)"""

    values: np.ndarray
    subsamples: List[np.ndarray] = field(default_factory=list)

    @property
    def anomaly_scores(self) -> np.ndarray:
        return -self.values

    def __len__(self) -> int:
        return self.values.size


# =========================================================================
# NOISE KEYING
# =========================================================================

def keyed_noise(objective: Objective, seed: int, epoch: int, rows: Tensor) -> Optional[Tensor]:
    """
    Monte-Carlo draws for a batch of rows, shape (n, *objective.noise_shape()).

    The key is the checkpoint epoch, so a checkpoint draws the same noise in any
    store that holds it. Returns None for objectives without noise.
    """
    shape = objective.noise_shape()
    if shape is None:
        return None
    rows = rows.reshape(-1, objective.sample_width)
    draws = [Rng(derive_seed(seed, "mc", epoch, row)).normal(shape) for row in rows]
    if not draws:
        return torch.zeros((0, *shape), dtype=DTYPE)
    return torch.stack(draws)


def _check_store(store: CheckpointStore, model: AnomalyModel):
    if len(store) == 0:
        raise ConfigError("checkpoint store is empty")
    if store.fingerprint != model.fingerprint():
        raise IncompatibleCheckpointError("checkpoint store does not belong to this model")


def _sample_gradient(objective: Objective, params: FlatParams, x: Tensor, seed: int, epoch: int) -> FlatParams:
    noise = keyed_noise(objective, seed, epoch, x)
    return per_sample_gradient(None, params, x, objective, None if noise is None else noise[0])


# =========================================================================
# TRACIN
# =========================================================================

def tracin_cp(store: CheckpointStore, model: AnomalyModel, x, x_prime, seed: int = 0,
              mc_samples: Optional[int] = None) -> float:
    """
    Influence of training sample x on the loss of x_prime, summed over checkpoints.

    Args:
        store: checkpoints (params and learning rate) from train()
        model: model the store was trained for; supplies the loss
        x: training sample
        x_prime: test sample
        seed: keys the Monte-Carlo draws of VAE losses
        mc_samples: number of draws l per loss (defaults to the model's)
    """
    _check_store(store, model)
    objective = model.objective(mc_samples)
    x = as_vector(x, objective.sample_width)
    x_prime = as_vector(x_prime, objective.sample_width, what="x_prime")
    total = 0.0
    for cp in store:
        g = _sample_gradient(objective, cp.params, x, seed, cp.epoch)
        g_prime = _sample_gradient(objective, cp.params, x_prime, seed, cp.epoch)
        total += cp.learning_rate * grad_dot(g_prime, g)
    return total


def self_influence(store: CheckpointStore, model: AnomalyModel, x, seed: int = 0,
                   mc_samples: Optional[int] = None) -> float:
    """TracInCP of a sample on itself: sum_i lr_i ||grad l(theta_i, x)||^2 >= 0"""
    return tracin_cp(store, model, x, x, seed, mc_samples)


def _chunked_gradients(objective: Objective, params: FlatParams, rows: Tensor, seed: int, epoch: int,
                       chunk_size: int):
    for start in range(0, rows.shape[0], chunk_size):
        chunk = rows[start:start + chunk_size]
        yield start, batch_gradients(objective, params, chunk, keyed_noise(objective, seed, epoch, chunk))


def tracin_ad(store: CheckpointStore, model: AnomalyModel, train_set, val_set, cfg: InfluenceConfig,
              progress: bool = True) -> InfluenceResult:
    """
    Mean TracInCP influence of a random train subsample on every validation row.

    The subsample B (size m, without replacement) is drawn once before the
    checkpoint loop, or redrawn at every checkpoint when
    cfg.resample_per_checkpoint is set. Since the mean over B of
    g' . g_x equals g' . mean(g_x), the m train gradients of a checkpoint are
    averaged once and reused for every validation row.

    Returns:
        InfluenceResult aligned with the rows of val_set
    """
    _check_store(store, model)
    objective = model.objective(cfg.mc_loss_samples)
    train_rows = as_matrix(train_set, objective.sample_width, what="train set")
    val_rows = as_matrix(val_set, objective.sample_width, what="validation set")
    n_train, n_val = train_rows.shape[0], val_rows.shape[0]
    if cfg.subsample_size > n_train:
        raise DataError(f"subsample size m={cfg.subsample_size} exceeds the {n_train} training rows")

    rng = Rng(cfg.seed).derive("subsample")
    subsample = rng.choice(n_train, cfg.subsample_size)
    subsamples = []
    values = torch.zeros(n_val, dtype=DTYPE)

    logger.info(f"🔍 TracInAD: {len(store)} checkpoints, m={cfg.subsample_size}, {n_val} validation rows"
                + (" (B redrawn per checkpoint)" if cfg.resample_per_checkpoint else ""))
    show = progress and logger.isEnabledFor(logging.INFO)
    for i, cp in enumerate(tqdm(store.checkpoints, desc="checkpoints", disable=not show, leave=False)):
        if cfg.resample_per_checkpoint and i > 0:
            subsample = rng.choice(n_train, cfg.subsample_size)
        subsamples.append(subsample.numpy().copy())

        batch = train_rows[subsample]
        mean_gradient = batch_gradients(objective, cp.params, batch,
                                        keyed_noise(objective, cfg.seed, cp.epoch, batch)).mean(dim=0)
        for start, gradients in _chunked_gradients(objective, cp.params, val_rows, cfg.seed, cp.epoch,
                                                       cfg.chunk_size):
            values[start:start + gradients.shape[0]] += cp.learning_rate * (gradients @ mean_gradient)

    return InfluenceResult(values.numpy(), subsamples)


def self_influence_scores(store: CheckpointStore, model: AnomalyModel, rows, seed: int = 0,
                          mc_samples: Optional[int] = None, chunk_size: int = 4096) -> np.ndarray:
    """Self-influence of every row; large values mark atypical samples"""
    _check_store(store, model)
    objective = model.objective(mc_samples)
    rows = as_matrix(rows, objective.sample_width)
    values = torch.zeros(rows.shape[0], dtype=DTYPE)
    for cp in store:
        for start, gradients in _chunked_gradients(objective, cp.params, rows, seed, cp.epoch, chunk_size):
            values[start:start + gradients.shape[0]] += cp.learning_rate * (gradients ** 2).sum(dim=1)
    return values.numpy()


def top_influencers(store: CheckpointStore, model: AnomalyModel, train_set, x_prime, k: int,
                    proponents: bool = True, seed: int = 0,
                    mc_samples: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    The k training rows with the largest (proponents) or smallest (opponents)
    TracInCP influence on x_prime.

    Returns:
        (indices, influence values), most extreme first
    """
    _check_store(store, model)
    objective = model.objective(mc_samples)
    train_rows = as_matrix(train_set, objective.sample_width, what="train set")
    x_prime = as_vector(x_prime, objective.sample_width, what="x_prime")
    k = min(k, train_rows.shape[0])
    values = torch.zeros(train_rows.shape[0], dtype=DTYPE)
    for cp in store:
        g_prime = _sample_gradient(objective, cp.params, x_prime, seed, cp.epoch).values
        gradients = batch_gradients(objective, cp.params, train_rows,
                                    keyed_noise(objective, seed, cp.epoch, train_rows))
        values += cp.learning_rate * (gradients @ g_prime)
    order = torch.argsort(values, descending=proponents, stable=True)[:k]
    return order.numpy(), values[order].numpy()


# =========================================================================
# LEAVE-ONE-OUT ORACLE
# =========================================================================

def loo_influence_oracle(train_set, x_index: int, x_prime, model_factory: Callable[[], AnomalyModel],
                         cfg: TrainConfig, seed: int = 0) -> float:
    """
    Retraining-based influence of train row x_index on x_prime.

    Trains twice under the same config and seed, with and without the row, and
    returns l(theta_without, x') - l(theta_with, x'): positive when including the
    row lowered the loss of x', the same orientation as TracInCP.
    Only meant for tiny instances (at most 50 rows).
    """
    rows = as_matrix(train_set, what="train set")
    n = rows.shape[0]
    if n < 2:
        raise DataError(f"leave-one-out needs at least 2 training rows, got {n}")
    if n > LOO_MAX_ROWS:
        raise DataError(f"leave-one-out oracle is limited to {LOO_MAX_ROWS} rows, got {n}")
    if not 0 <= x_index < n:
        raise DataError(f"row index {x_index} out of range for {n} rows")

    reduced = torch.cat([rows[:x_index], rows[x_index + 1:]])
    with_row = model_factory()
    without_row = model_factory()
    params_with = train(with_row, rows, cfg, progress=False).final_params()
    params_without = train(without_row, reduced, cfg, progress=False).final_params()

    objective = with_row.objective()
    x_prime = as_matrix(x_prime, objective.sample_width, what="x_prime")
    noise = keyed_noise(objective, seed, -1, x_prime)
    loss_with = float(sample_losses(objective, params_with, x_prime, noise)[0])
    loss_without = float(sample_losses(without_row.objective(), params_without, x_prime, noise)[0])
    return loss_without - loss_with
