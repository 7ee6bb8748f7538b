import numpy as np
import pytest

from mixsim.backstepping import solve_kernels
from mixsim.model import linearize
from mixsim.params import paper_config


@pytest.fixture(scope="session")
def cfg():
    return paper_config()


@pytest.fixture(scope="session")
def params(cfg):
    return cfg.traffic


@pytest.fixture(scope="session")
def nominal(cfg):
    return linearize(cfg.traffic, cfg.modes.nominal)


@pytest.fixture(scope="session")
def all_modes(cfg):
    return [linearize(cfg.traffic, s) for s in cfg.modes.states]


@pytest.fixture(scope="session")
def kernels64(nominal):
    return solve_kernels(nominal, 64)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
