import math

import numpy as np
import pytest

from tcbct.geometry import ScanGeometry, VolumeGrid

FULL_SCAN = dict(sdd=600.0, sid=400.0, det_cols=640, det_rows=640, pixel_u=0.2, pixel_v=0.2,
              offset_u=57.0, offset_v=29.0, n_angles=300)

DESK_GEOMETRY = ScanGeometry(600.0, 400.0, 96, 64, 1.5, 1.5, 13.5, 4.5, 120)
DESK_FINE = VolumeGrid((-60.0, -60.0, -27.5), (60.0, 60.0, 32.5), (1.25, 1.25, 1.25))
DESK_COARSE = VolumeGrid((-105.0, -62.5, -30.0), (105.0, 147.5, 80.0), (2.5, 2.5, 2.5))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def full_scan():
    return ScanGeometry(**FULL_SCAN)


@pytest.fixture
def small_geom():
    """Centered detector that covers a 32 mm cube at every angle."""
    return ScanGeometry(sdd=300.0, sid=200.0, det_cols=40, det_rows=40, pixel_u=1.5,
                        pixel_v=1.5, n_angles=36, angle_end=2 * math.pi)


@pytest.fixture
def small_grid():
    return VolumeGrid((-16.0, -16.0, -16.0), (16.0, 16.0, 16.0), (2.0, 2.0, 2.0))


# -- acceptance summary lines ---------------------------------------------------------

_CRITERIA: dict[int, str] = {}


@pytest.fixture(scope="session")
def criterion_line():
    """Record (and print) the one-line verdict for an acceptance criterion."""

    def record(number: int, passed: bool, detail: str) -> bool:
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        _CRITERIA[number] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[number])
