import numpy as np
import pytest

from clmae.config import load_config
from clmae.data import gen_synthetic

TINY = dict(h=16, w=16, c=1, p=8, d=16, heads=2, depth=1, dec_d=8, dec_depth=1, dec_heads=2,
            cmm_depth=1, batch_size=4, T=10, dtype="float64")


@pytest.fixture
def tiny_config():
    return load_config(overrides=TINY)


@pytest.fixture(scope="session")
def tiny_images():
    return gen_synthetic(3, 6, 16, 16, 1, seed=11).images


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
