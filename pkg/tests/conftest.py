import numpy as np
import pytest

from pose6d.geometry import CameraIntrinsics, ObjectModel, Pose, quaternion_to_matrix
from pose6d.synth import box_mesh


@pytest.fixture
def K():
    return CameraIntrinsics(fx=500.0, fy=500.0, cx=320.0, cy=240.0, width=640, height=480)


@pytest.fixture
def K416():
    return CameraIntrinsics(fx=500.0, fy=500.0, cx=208.0, cy=208.0, width=416, height=416)


@pytest.fixture
def unit_cube_vertices():
    return np.array([[x, y, z] for z in (-0.5, 0.5) for y in (-0.5, 0.5) for x in (-0.5, 0.5)])


@pytest.fixture
def box_model():
    V, F = box_mesh((0.10, 0.08, 0.06), subdivisions=2)
    return ObjectModel.from_vertices("box", 0, V, F)


def random_pose(rng, z_range=(0.5, 5.0), xy=0.0):
    R = quaternion_to_matrix(rng.standard_normal(4))
    t = np.array([rng.uniform(-xy, xy), rng.uniform(-xy, xy), rng.uniform(*z_range)])
    return Pose(R, t)


# criterion number -> (passed, title, detail); filled by test_acceptance
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, title, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n} {'PASS' if ok else 'FAIL'}: {title} ({detail})")
