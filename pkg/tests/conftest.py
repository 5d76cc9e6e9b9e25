import numpy as np
import pytest
from hypothesis import settings

from sgrocc.config import load_config
from sgrocc.geometry import CameraIntrinsics, Pose

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


@pytest.fixture(scope="session")
def bench():
    return load_config(None)


@pytest.fixture
def K100():
    return CameraIntrinsics(100.0, 100.0, 50.0, 50.0, 101, 101)


@pytest.fixture
def identity_pose():
    return Pose.identity()


@pytest.fixture
def rng():
    return np.random.default_rng(0)
