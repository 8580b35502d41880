"""
training.py - Minibatch SGD with checkpoint snapshots

train() runs plain SGD (theta <- theta - lr * mean batch gradient, constant lr)
and snapshots the parameters every `checkpoint_step` epochs plus after the last
epoch. The resulting CheckpointStore is what TracInCP sums over; storage.py
writes it to disk.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Iterator, List, Optional

import torch
from pydantic import BaseModel, ConfigDict, Field
from tqdm import tqdm

from errors import ConfigError, DataError, DivergenceError, IncompatibleCheckpointError
from models import AnomalyModel
from numeric import FlatParams, LossKind, ParamLayout, Rng, as_matrix, mean_loss_and_gradient

logger = logging.getLogger(__name__)


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    epochs: int = Field(ge=1)
    batch_size: int = Field(ge=1)
    learning_rate: float = Field(gt=0)
    checkpoint_step: int = Field(ge=1)
    seed: int = Field(default=0, ge=0)
    loss_kind: Optional[LossKind] = None


@dataclass(frozen=True, eq=False)
class Checkpoint:
    epoch: int
    params: FlatParams
    learning_rate: float

    def __eq__(self, other) -> bool:
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return (self.epoch == other.epoch and self.learning_rate == other.learning_rate
                and self.params == other.params)

    __hash__ = None


@dataclass(eq=False)
class CheckpointStore:
    """Checkpoints in strictly increasing epoch order, all sharing one layout"""

    fingerprint: bytes
    checkpoints: List[Checkpoint] = field(default_factory=list)
    loss_history: List[float] = field(default_factory=list)

    def append(self, checkpoint: Checkpoint):
        if self.checkpoints:
            last = self.checkpoints[-1]
            if checkpoint.epoch <= last.epoch:
                raise ValueError(f"checkpoint epochs must increase: {checkpoint.epoch} after {last.epoch}")
            if checkpoint.params.layout != last.params.layout:
                raise IncompatibleCheckpointError("checkpoint layout differs from the rest of the store")
        self.checkpoints.append(checkpoint)

    @property
    def layout(self) -> Optional[ParamLayout]:
        return self.checkpoints[0].params.layout if self.checkpoints else None

    def scaled(self, factor: float) -> "CheckpointStore":
        """Same snapshots with every learning rate multiplied by factor"""
        return CheckpointStore(self.fingerprint, [Checkpoint(cp.epoch, cp.params, cp.learning_rate * factor)
                                                  for cp in self.checkpoints])

    def singletons(self) -> List["CheckpointStore"]:
        return [CheckpointStore(self.fingerprint, [cp]) for cp in self.checkpoints]

    def final_params(self) -> FlatParams:
        if not self.checkpoints:
            raise ConfigError("checkpoint store is empty")
        return self.checkpoints[-1].params

    def __len__(self) -> int:
        return len(self.checkpoints)

    def __iter__(self) -> Iterator[Checkpoint]:
        return iter(self.checkpoints)

    def __eq__(self, other) -> bool:
        if not isinstance(other, CheckpointStore):
            return NotImplemented
        return self.fingerprint == other.fingerprint and self.checkpoints == other.checkpoints

    __hash__ = None


def expected_checkpoints(epochs: int, step: int) -> int:
    return epochs // step + (0 if epochs % step == 0 else 1)


def train(model: AnomalyModel, train_set, cfg: TrainConfig, progress: bool = True) -> CheckpointStore:
    """
    Train a model with shuffled minibatch SGD and collect checkpoints.

    Args:
        model: model at its initial parameters (Deep SVDD center already set)
        train_set: normal-only training rows
        cfg: epochs, batch size, learning rate, checkpoint step and seed
        progress: show a tqdm bar over epochs

    Returns:
        CheckpointStore with one snapshot per `checkpoint_step` epochs, plus the final epoch
    """
    objective = model.objective()
    if cfg.loss_kind is not None and cfg.loss_kind != objective.kind:
        raise ConfigError(f"train config asks for loss {cfg.loss_kind.value!r}, "
                          f"model optimizes {objective.kind.value!r}")
    x = as_matrix(train_set, objective.sample_width, what="train set")
    n = x.shape[0]
    if n == 0:
        raise DataError("train set is empty")

    rng = Rng(cfg.seed).derive("sgd")
    noise_shape = objective.noise_shape()
    params = model.params
    lr = cfg.learning_rate
    store = CheckpointStore(model.fingerprint())

    logger.info(f"🚀 Training {model.kind} on {n} rows: {cfg.epochs} epochs, batch {cfg.batch_size}, "
                f"lr {lr:g}, checkpoint every {cfg.checkpoint_step} epochs")

    show = progress and logger.isEnabledFor(logging.INFO)
    for epoch in tqdm(range(1, cfg.epochs + 1), desc="epochs", disable=not show, leave=False):
        order = rng.permutation(n)
        total = 0.0
        for batch_index, start in enumerate(range(0, n, cfg.batch_size), start=1):
            rows = order[start:start + cfg.batch_size]
            noise = rng.normal((len(rows), *noise_shape)) if noise_shape else None
            gradient, loss = mean_loss_and_gradient(objective, params, x[rows], noise)
            if not math.isfinite(loss) or not torch.isfinite(gradient).all():
                logger.error(f"❌ Non-finite loss at epoch {epoch}, batch {batch_index}")
                raise DivergenceError(epoch, batch_index, loss)
            params = params.with_values(params.values - lr * gradient)
            total += loss * len(rows)
        store.loss_history.append(total / n)

        if epoch % cfg.checkpoint_step == 0 or epoch == cfg.epochs:
            store.append(Checkpoint(epoch, params, lr))

    logger.info(f"✅ Training done: {len(store)} checkpoints, final mean loss {store.loss_history[-1]:.6g}")
    return store
