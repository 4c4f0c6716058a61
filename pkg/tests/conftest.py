import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ncsim.grid import RngStream, build_grid


@pytest.fixture
def rng():
    return RngStream(0xA11CE)


@pytest.fixture
def grid8():
    return build_grid(8, -10.0, 10.0)


@pytest.fixture
def grid4():
    return build_grid(4, -10.0, 10.0)
