"""Pytest configuration and shared fixtures for PatchLock tests."""

import logging

import numpy as np
import pytest

from patchlock.toymodel import TrainConfig, split_dataset, train


@pytest.fixture(autouse=True)
def quiet_logging():
    """Keep library logging quiet during tests."""
    logging.getLogger("PatchLock").setLevel(logging.WARNING)


@pytest.fixture
def rng():
    """Seeded generator so every test run sees the same random inputs."""
    return np.random.default_rng(20240601)


@pytest.fixture(scope="session")
def toy_splits():
    """Default synthetic train / held-out split."""
    return split_dataset(seed=0, n_train=256, n_test=64)


@pytest.fixture(scope="session")
def trained_toy(toy_splits):
    """Toy model trained once per session with the default recipe."""
    logging.getLogger("PatchLock").setLevel(logging.WARNING)
    train_set, _ = toy_splits
    return train(TrainConfig(), train_set)
