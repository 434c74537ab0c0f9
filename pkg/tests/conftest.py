import numpy as np
import pytest

from mvsceneflow.synthworld import derive_measures, generate, s1_config


@pytest.fixture(scope="session")
def s1():
    cfg = s1_config()
    world = generate(cfg)
    return cfg, world, derive_measures(world, cfg)


@pytest.fixture(scope="session")
def s1_measures(s1):
    return s1[2]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
