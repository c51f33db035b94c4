import numpy as np
import pytest

from ates_mhe.domain import default_config, state_bounds
from ates_mhe.surrogate import nominal_model


@pytest.fixture(scope="session")
def cfg():
    return default_config()


@pytest.fixture(scope="session")
def model(cfg):
    return nominal_model(cfg)


@pytest.fixture(scope="session")
def bounds(cfg):
    return state_bounds(cfg)


def random_admissible_state(rng, bounds):
    """Uniform sample inside the temperature box."""
    return rng.uniform(bounds.lower, bounds.upper)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
