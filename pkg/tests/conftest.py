import numpy as np
import pytest

from scoredistill.schedule import build_schedule
from scoredistill.target import bimodal_benchmark, standard_normal


@pytest.fixture(scope="session")
def sched():
    return build_schedule("linear", 1000, 1e-4, 0.02)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def bimodal():
    return bimodal_benchmark()


@pytest.fixture(scope="session")
def gauss2():
    return standard_normal(2)
