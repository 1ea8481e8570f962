import numpy as np
import pytest

from itofuse.geometry import Camera, CameraRig, Distortion, Intrinsics, RigidTransform


def pinhole(fx=100.0, fy=100.0, cx=50.0, cy=50.0, width=101, height=101):
    return Intrinsics(fx, fy, cx, cy, width, height)


def identity_rig(width=40, height=30, f=40.0):
    k = Intrinsics(f, f, (width - 1) / 2, (height - 1) / 2, width, height)
    return CameraRig(Camera(k), Camera(k), RigidTransform())


def small_rig():
    """32x24 RGB, 16x12 iToF with a narrower field of view and a 5 cm baseline."""
    rgb = Camera(Intrinsics(24.0, 24.0, 15.5, 11.5, 32, 24), Distortion(k1=-0.03))
    itof = Camera(Intrinsics(15.0, 15.0, 7.5, 5.5, 16, 12))
    return CameraRig(itof, rgb, RigidTransform(np.eye(3), [0.05, 0.0, 0.0]))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
