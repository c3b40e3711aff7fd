import numpy as np
import pytest

from longner import tensor as T


@pytest.fixture(autouse=True)
def float64_default():
    T.set_default_dtype("float64")
    yield
    T.set_default_dtype("float64")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def rand_tensor(rng, shape, requires_grad=True, scale=1.0):
    return T.Tensor(rng.standard_normal(shape) * scale, requires_grad=requires_grad)
