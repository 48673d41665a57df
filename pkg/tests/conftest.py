import numpy as np
import pytest
import torch

from tfmcl.signal import gen_synthetic_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture(scope="session")
def small_ds():
    """10 subjects x 6 windows, E=4, T=128 at 64 Hz."""
    return gen_synthetic_dataset(10, 6, 4, 128, 64.0, (8.0, 12.0), 3.0, 1.0, seed=3)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
