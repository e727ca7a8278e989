import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from raysfm.geometry import Intrinsics, Pose, rotvec_to_matrix  # noqa: E402


def random_pose(rng, radius=1.0):
    R = rotvec_to_matrix(rng.normal(size=3))
    return Pose.from_matrix(R, rng.normal(scale=radius, size=3))


def random_intrinsics(rng):
    w, h = int(rng.integers(64, 800)), int(rng.integers(64, 800))
    return Intrinsics(rng.uniform(80, 900), rng.uniform(80, 900), rng.uniform(0, w - 1), rng.uniform(0, h - 1), w, h)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed after the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
