import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from core import TimeGrid, make_scenario  # noqa: E402


@pytest.fixture
def grid():
    return TimeGrid(1.0, 100)


@pytest.fixture
def scenario(grid):
    return make_scenario(20240601, 0, grid)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
