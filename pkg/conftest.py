"""
Shared fixtures: toy model configs, 64-bit mode and a small generated dataset.
"""

import pytest
import torch

from mtlswin.config import GeneratorConfig, ModelConfig
from mtlswin.data import generate_dataset
from mtlswin.numerics import precision


@pytest.fixture
def float64():
    with precision(torch.float64):
        yield


def toy_config(tasks=("cls", "seg", "rec"), **overrides) -> ModelConfig:
    """Two stages of depth 1, 16 channels, 32x32 input"""
    values = dict(depths=[1, 1], channels=16, window=4, image_size=32, tasks=list(tasks))
    values.update(overrides)
    return ModelConfig(**values)


@pytest.fixture
def toy_cfg() -> ModelConfig:
    return toy_config()


@pytest.fixture(scope="session")
def small_gen_cfg() -> GeneratorConfig:
    return GeneratorConfig(
        image_size=32, train_count=40, val_count=8, test_count=8,
        shift_pool_per_hospital=16, slices_per_patient=4, seed=3,
    )


@pytest.fixture(scope="session")
def small_dataset(small_gen_cfg):
    return generate_dataset(small_gen_cfg)
