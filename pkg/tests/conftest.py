import numpy as np
import pytest

from agebranch import OffspringLaw, RateFunction, solve_malthus


@pytest.fixture(scope="session")
def trial():
    return RateFunction.trial()


@pytest.fixture(scope="session")
def binary():
    return OffspringLaw.binary()


@pytest.fixture(scope="session")
def md_trial(trial, binary):
    return solve_malthus(trial, binary)


@pytest.fixture(scope="session")
def const():
    return RateFunction.constant(0.4)


@pytest.fixture(scope="session")
def md_const(const, binary):
    return solve_malthus(const, binary)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
