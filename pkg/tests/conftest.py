import numpy as np
import pytest

from infdelay.fading_paths import TimeGrid


@pytest.fixture
def grid():
    return TimeGrid(1.0, 1 / 64, -0.5)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
