import logging

import numpy as np
import pytest

import scenes
from config import ModelConfig, TrainConfig, WorldConfig
from model import ModelParams, collate


@pytest.fixture(autouse=True)
def _no_seed_override(monkeypatch):
    monkeypatch.delenv("W2R2_SEED", raising=False)


@pytest.fixture
def tiny_world():
    """2-4 objects, 3 categories: cheap enough for finite-difference checks."""
    return WorldConfig(num_objects_min=2, num_objects_max=4, num_categories=3,
                       train_count=64, val_count=48, seed=3)


@pytest.fixture
def tiny_model():
    return ModelConfig(d2d=4, d3d=4, dq=4, dh=4, n_max=4, seed=1)


@pytest.fixture
def tiny_splits(tiny_world):
    return scenes.build_dataset(tiny_world)


@pytest.fixture
def tiny_params(tiny_model, tiny_world):
    return ModelParams.init(tiny_model, tiny_world.num_categories)


@pytest.fixture
def tiny_batch(tiny_splits, tiny_world):
    return collate(tiny_splits["train"].pairs()[:20], tiny_world.num_categories, n_max=4)


@pytest.fixture
def small_world():
    return WorldConfig(num_objects_min=3, num_objects_max=6, num_categories=5,
                       train_count=256, val_count=600, seed=11)


@pytest.fixture
def small_model():
    return ModelConfig(d2d=8, d3d=8, dq=8, dh=8, n_max=6, seed=2)


@pytest.fixture
def fast_train():
    return TrainConfig(epochs=1, batch_size=16, lr=1e-3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def quiet_logs(caplog):
    caplog.set_level(logging.WARNING)
    return caplog
