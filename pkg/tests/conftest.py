import numpy as np
import pytest

from timecaps.model import ModelConfig


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_cfg():
    return ModelConfig.tiny()


@pytest.fixture
def toy_cfg():
    return ModelConfig.toy()
