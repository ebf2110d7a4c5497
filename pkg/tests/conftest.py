import numpy as np
import pytest

from banet.tensor import enable_malloc_reuse, tape

enable_malloc_reuse()


@pytest.fixture(autouse=True)
def clean_tape():
    tape().reset()
    yield
    tape().reset()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
