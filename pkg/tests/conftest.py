import numpy as np
import pytest

from claimembed.synth import synthetic_dataset


@pytest.fixture(scope="session")
def small_claims():
    ds, truth = synthetic_dataset(3000, seed=7)
    return ds, truth


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
