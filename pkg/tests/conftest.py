import numpy as np
import pytest

from tracksim.geometry import CameraIntrinsics


@pytest.fixture
def cam():
    return CameraIntrinsics(fx=277.0, fy=277.0, cx=160.0, cy=120.0, width=320, height=240)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_unit_quaternion(rng):
    q = rng.standard_normal(4)
    return q / np.linalg.norm(q)
