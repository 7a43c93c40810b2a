import numpy as np
import pytest

from clcbench.model import ModelConfig, init_model


@pytest.fixture(scope="session")
def tiny():
    """Small 2-layer model used by most unit tests."""
    cfg = ModelConfig(n_layers=2, n_heads=2, d_model=8, max_positions=256)
    return init_model(cfg, 123), cfg


@pytest.fixture(scope="session")
def toy():
    """The default benchmarking model: 4 layers, 4 heads, d_model 64."""
    cfg = ModelConfig(n_layers=4, n_heads=4, d_model=64, max_positions=1024)
    return init_model(cfg, 42), cfg


@pytest.fixture
def rng():
    return np.random.default_rng(0)
