import numpy as np
import pytest

from mssample.ptasim import SimConfig, simulate_dataset


@pytest.fixture(scope="session")
def small_dataset():
    """Small simulated series shared by model-level tests."""
    config = SimConfig(n_samples=120, n_freq=4, true_log10_amp=0.3,
                       true_gamma=3.0)
    return simulate_dataset(config, seed=2024)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
