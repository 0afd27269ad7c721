import numpy as np
import pytest

from cfrnet.tensor import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def t64(a, grad=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad, dtype=np.float64)


@pytest.fixture
def make64():
    return t64
