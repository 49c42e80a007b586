import numpy as np
import pytest

from detprior.schedule import make_schedule


@pytest.fixture(scope="session")
def cosine_schedule():
    return make_schedule("cosine", 1000)


@pytest.fixture(scope="session")
def small_schedule():
    return make_schedule("cosine", 10)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


def random_pair(rng, shape=(3, 16, 16), dtype=np.float32):
    x = rng.uniform(-1.0, 1.0, shape).astype(dtype)
    y = rng.uniform(-1.0, 1.0, shape).astype(dtype)
    return x, y
