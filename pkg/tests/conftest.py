import numpy as np
import pytest

from kllab.counterexample import cex_field
from kllab.zoo import make_field


@pytest.fixture(scope="session")
def cex12():
    return cex_field(12)


@pytest.fixture(scope="session")
def cex31():
    return cex_field(31)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(params=["power:2", "quad:1,4", "norm", "flat:0.5"])
def zoo_field(request):
    return make_field(request.param)
