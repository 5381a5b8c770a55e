import numpy as np
import pytest

from hds import config as config_mod
from hds import data


@pytest.fixture(scope="session")
def synthetic():
    """Default synthetic design: 6 devices, 12 treatments each, T = 50, 5% noise."""
    return data.synth_generate(data.CassetteCatalog(), data.DEFAULT_DEVICES, data.treatment_grid(),
                               data.SyntheticTruth(), 0.05, 50, seed=0)


@pytest.fixture(scope="session")
def smoke_config():
    """Two devices, T = 20, K = 10: small enough for end-to-end tests."""
    return config_mod.config_from_dict({
        "data": {"synth": {"devices": ["Pcat-Pcat", "R33-S34"], "T": 20}},
        "training": {"epochs": 3, "K_train": 10, "K_eval": 20, "batch_size": 12, "lr": 3e-3},
    })


@pytest.fixture(scope="session")
def smoke_data(smoke_config):
    return smoke_config.load_data()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
