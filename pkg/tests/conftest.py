import numpy as np
import pytest

from pharos.data import gen_synthetic


def random_signs(rng, n, k):
    return rng.choice(np.array([-1, 1], dtype=np.int8), size=(n, k))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_ds():
    return gen_synthetic(n_classes=5, dim=12, n_train=120, n_db=300, n_query=40, seed=7)
