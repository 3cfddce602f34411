import numpy as np
import pytest

from handtrack.camera import default_camera
from handtrack.skeleton import load_skeleton


@pytest.fixture(scope="session")
def skeleton():
    return load_skeleton()


@pytest.fixture(scope="session")
def camera():
    return default_camera()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
