import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from qbsdej.model import MarkSpace, TimeGrid, build_lattice  # noqa: E402


@pytest.fixture
def marks2():
    return MarkSpace([-0.5, 1.0], [0.3, 0.2])


@pytest.fixture
def small_lattice():
    return build_lattice(TimeGrid(1.0, 4), MarkSpace([1.0], [0.5]))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
