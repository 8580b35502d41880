import logging

import numpy as np
import pytest
import torch
from pydantic import ValidationError

from conftest import scalar_model, scalar_rows
from errors import ConfigError, DataError, DivergenceError, IncompatibleCheckpointError
from models import DsvddModel, VaeModel, dsvdd_center_init
from numeric import LossKind, Rng, sample_losses
from training import Checkpoint, CheckpointStore, TrainConfig, expected_checkpoints, train


def _cfg(**overrides) -> TrainConfig:
    values = dict(epochs=3, batch_size=8, learning_rate=0.01, checkpoint_step=1, seed=0)
    values.update(overrides)
    return TrainConfig(**values)


def test_single_epoch_single_checkpoint():
    store = train(scalar_model(), scalar_rows([1.0, 2.0]), _cfg(epochs=1, checkpoint_step=1), progress=False)
    assert [cp.epoch for cp in store] == [1]


def test_hand_sgd_step():
    store = train(scalar_model(bias=0.0), scalar_rows([1.0]),
                  _cfg(epochs=1, batch_size=1, learning_rate=0.1), progress=False)
    cp = store.checkpoints[0]
    assert cp.learning_rate == 0.1
    assert float(cp.params.values[1]) == pytest.approx(0.1, abs=1e-15)
    assert float(cp.params.values[0]) == 0.0


@pytest.mark.parametrize("epochs, step, expected", [(250, 10, 25), (20, 1, 20), (20, 2, 10), (25, 10, 3), (1, 5, 1)])
def test_checkpoint_count(epochs, step, expected):
    assert expected_checkpoints(epochs, step) == expected


def test_final_epoch_is_always_snapshotted():
    store = train(scalar_model(), scalar_rows(np.linspace(0, 1, 6)),
                  _cfg(epochs=25, checkpoint_step=10), progress=False)
    assert [cp.epoch for cp in store] == [10, 20, 25]
    assert len(store.loss_history) == 25


def test_training_is_deterministic(gaussian_table):
    cfg = _cfg(epochs=4, batch_size=7, seed=3)
    a = train(VaeModel.build(3, (4,), 2, Rng(1), mc_samples=2), gaussian_table, cfg, progress=False)
    b = train(VaeModel.build(3, (4,), 2, Rng(1), mc_samples=2), gaussian_table, cfg, progress=False)
    assert a == b
    assert a.loss_history == b.loss_history


def test_different_seed_changes_the_run(gaussian_table):
    model = VaeModel.build(3, (4,), 2, Rng(1))
    a = train(model, gaussian_table, _cfg(seed=1), progress=False)
    b = train(model, gaussian_table, _cfg(seed=2), progress=False)
    assert a != b


def test_vae_training_lowers_the_loss(gaussian_table):
    model = VaeModel.build(3, (8,), 2, Rng(4), mc_samples=4)
    store = train(model, gaussian_table, _cfg(epochs=30, batch_size=8, learning_rate=0.01, checkpoint_step=10),
                  progress=False)
    objective = model.objective()
    noise = Rng(99).normal((gaussian_table.shape[0], *objective.noise_shape()))
    first = float(sample_losses(objective, store.checkpoints[0].params, gaussian_table, noise).mean())
    last = float(sample_losses(objective, store.final_params(), gaussian_table, noise).mean())
    initial = float(sample_losses(objective, model.params, gaussian_table, noise).mean())
    assert last < first < initial


def test_dsvdd_training_pulls_rows_towards_the_center(gaussian_table):
    model = DsvddModel.build(3, (6,), 2, Rng(2))
    model = model.with_center(dsvdd_center_init(model, gaussian_table))
    store = train(model, gaussian_table, _cfg(epochs=20, learning_rate=0.05), progress=False)
    before = model.baseline_scores(gaussian_table).mean()
    after = model.with_params(store.final_params()).baseline_scores(gaussian_table).mean()
    assert after < before


def test_divergence_reports_epoch_and_batch():
    with pytest.raises(DivergenceError) as info:
        train(scalar_model(), scalar_rows([1e200, 1e200]), _cfg(batch_size=1), progress=False)
    assert info.value.epoch == 1
    assert info.value.batch == 1


@pytest.mark.parametrize("field, value", [("epochs", 0), ("batch_size", 0), ("learning_rate", 0.0),
                                          ("checkpoint_step", 0)])
def test_config_validation(field, value):
    with pytest.raises(ValidationError):
        _cfg(**{field: value})


def test_loss_kind_must_match_the_model():
    with pytest.raises(ConfigError):
        train(scalar_model(), scalar_rows([1.0]), _cfg(loss_kind=LossKind.VAE_ELBO), progress=False)


def test_empty_train_set_is_rejected():
    with pytest.raises(DataError):
        train(scalar_model(), np.zeros((0, 2)), _cfg(), progress=False)


def test_store_enforces_order_and_layout():
    model = scalar_model()
    store = CheckpointStore(model.fingerprint())
    store.append(Checkpoint(2, model.params, 0.1))
    with pytest.raises(ValueError):
        store.append(Checkpoint(2, model.params, 0.1))
    other = VaeModel.build(2, (3,), 1, Rng(0))
    with pytest.raises(IncompatibleCheckpointError):
        store.append(Checkpoint(3, other.params, 0.1))


def test_scaled_store_multiplies_learning_rates():
    model = scalar_model()
    store = CheckpointStore(model.fingerprint(), [Checkpoint(1, model.params, 0.1), Checkpoint(2, model.params, 0.2)])
    assert [cp.learning_rate for cp in store.scaled(3.0)] == pytest.approx([0.3, 0.6])
    assert [len(s) for s in store.singletons()] == [1, 1]


def test_empty_store_has_no_final_params():
    with pytest.raises(ConfigError):
        CheckpointStore(b"\0" * 32).final_params()


def test_training_logs_start_and_finish(caplog):
    caplog.set_level(logging.INFO, logger="training")
    train(scalar_model(), scalar_rows([1.0, 2.0]), _cfg(epochs=2), progress=False)
    messages = [r.getMessage() for r in caplog.records if r.name == "training"]
    assert messages[0].startswith("🚀 Training")
    assert messages[-1].startswith("✅ Training done: 2 checkpoints")
