import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from tagi.data import toy_cubic
from tagi.engine import fit
from tagi.net import NetworkSpec, init_posterior

settings.register_profile("default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def cubic_net():
    """The 1-128-128-128-1 surrogate trained on raw toy-cubic data."""
    data = toy_cubic(200, 0.1, seed=0)
    spec = NetworkSpec.from_widths([1, 128, 128, 128, 1], ["tanh", "relu", "relu", "identity"])
    post = init_posterior(spec, 0, var_gain=0.01)
    post, _ = fit(spec, post, data.inputs, data.targets, 0.01, epochs=5, seed=0)
    return spec, post
