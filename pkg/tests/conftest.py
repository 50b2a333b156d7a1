import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from dualcap.geometry import Intrinsics, Pose, SimilarityTransform


def random_rotation(rng) -> np.ndarray:
    return Rotation.random(random_state=rng.integers(2**31)).as_matrix()


def random_similarity(rng, scale=True) -> SimilarityTransform:
    s = float(np.exp(rng.uniform(-1, 1))) if scale else 1.0
    return SimilarityTransform(s, random_rotation(rng), rng.uniform(-5, 5, 3))


def look_pose(center, target=(0.0, 0.0, 1.0)) -> Pose:
    """Camera at ``center`` looking at ``target`` with image y pointing down."""
    c = np.asarray(center, dtype=float)
    z = np.asarray(target, dtype=float) - c
    z /= np.linalg.norm(z)
    x = np.cross(z, [0.0, 0.0, 1.0])
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return Pose.from_center(np.stack([x, y, z]), c)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def intr():
    return Intrinsics(500.0, 500.0, 250.0, 250.0, 500, 500)


# one line per acceptance criterion, filled by test_acceptance.py
ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
