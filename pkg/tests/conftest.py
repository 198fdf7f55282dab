import numpy as np
import pytest

from aquagrasp.camera import CameraModel, WarpSpec


@pytest.fixture
def pinhole():
    return CameraModel(fx=200.0, fy=200.0, cx=111.5, cy=79.5, width=224, height=160)


@pytest.fixture
def distorted():
    return CameraModel(fx=200.0, fy=210.0, cx=112.0, cy=80.0, width=224, height=160,
                       dist=(-0.1, 0.01, 0.001, -0.0005, 0.0))


def pytest_terminal_summary(terminalreporter):
    from .helpers import ACCEPTANCE_LINES

    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
