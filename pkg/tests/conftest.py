"""Pytest configuration and shared fixtures for NRTR tests."""

from pathlib import Path

import numpy as np
import pytest

from nrtr.config import ModelConfig, SynthConfig
from nrtr.network import PointSetTransformer, build_model
from nrtr.swc import SwcForest
from nrtr.synth import generate_dataset

from .fixtures import chain_forest, tiny_model_config, tiny_synth_config


@pytest.fixture
def chain() -> SwcForest:
    """Three-node chain with spacing 2 and radius 1.5."""
    return chain_forest()


@pytest.fixture
def rng() -> np.random.Generator:
    """Seeded generator for random test inputs."""
    return np.random.default_rng(1234)


@pytest.fixture
def model_cfg() -> ModelConfig:
    """Tiny model configuration (16^3 blocks, 8 queries)."""
    return tiny_model_config()


@pytest.fixture
def tiny_model(model_cfg: ModelConfig) -> PointSetTransformer:
    """Freshly initialized tiny model."""
    return build_model(model_cfg, seed=0)


@pytest.fixture(scope="session")
def synth_cfg() -> SynthConfig:
    """Two-sample 16^3 synthetic dataset configuration."""
    return tiny_synth_config()


@pytest.fixture(scope="session")
def synth_dataset(tmp_path_factory: pytest.TempPathFactory, synth_cfg: SynthConfig) -> Path:
    """A generated synthetic dataset shared by the whole session (read-only)."""
    out = tmp_path_factory.mktemp("dataset")
    generate_dataset(synth_cfg, out)
    return out
