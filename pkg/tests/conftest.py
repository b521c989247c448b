import numpy as np
import pytest

from kdssl.data import SyntheticSpec


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_spec():
    return SyntheticSpec((30, 10, 10), dim=4, separation=3.0, noise=1.0)
