import numpy as np
import pytest

from statflow import Schedule, coordinate_objective, make_ou_model, make_tanh_model


@pytest.fixture(scope="session")
def ou():
    return make_ou_model(1.0, 0.5)


@pytest.fixture(scope="session")
def tanh_model():
    return make_tanh_model(1.0, 0.5, 0.5, 0.1)


@pytest.fixture(scope="session")
def coord_obj():
    return coordinate_objective(1, 0.7)


@pytest.fixture(scope="session")
def unit_schedule():
    # alpha_t = 1 / (1 + t)
    return Schedule(c=1.0, q=1.0)


@pytest.fixture()
def rng():
    return np.random.default_rng(7)
