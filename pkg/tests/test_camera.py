import numpy as np
import pytest

from surfeltrack.camera import (CameraIntrinsics, ProjectionError, backproject,
                                project, project_valid, projection_jacobian)
from gradcheck import central_diff, max_rel_err

K = CameraIntrinsics(fx=500.0, fy=500.0, cx=320.0, cy=240.0, width=640, height=480)


def test_optical_axis_hits_principal_point():
    assert np.allclose(project(np.array([0.0, 0.0, 1.0]), K), [320.0, 240.0])


def test_pinhole_values():
    assert np.allclose(project(np.array([0.1, 0.0, 1.0]), K), [370.0, 240.0])
    assert np.allclose(project(np.array([0.0, 0.2, 2.0]), K), [320.0, 290.0])


def test_behind_camera_raises():
    with pytest.raises(ProjectionError, match="behind camera"):
        project(np.array([0.0, 0.0, 0.0]), K)
    with pytest.raises(ProjectionError, match="behind camera"):
        project(np.array([[0.0, 0.0, 1.0], [0.1, 0.1, -0.5]]), K)


def test_project_valid_flags_instead_of_raising():
    pts = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, -1.0]])
    uv, ok = project_valid(pts, K)
    assert ok.tolist() == [True, False]
    assert np.allclose(uv[0], [320.0, 240.0])


def test_intrinsics_invariants():
    with pytest.raises(ValueError):
        CameraIntrinsics(fx=-1.0, fy=500.0, cx=320.0, cy=240.0, width=640, height=480)
    with pytest.raises(ValueError):
        CameraIntrinsics(fx=500.0, fy=500.0, cx=640.0, cy=240.0, width=640, height=480)


def test_backproject_project_roundtrip():
    rng = np.random.default_rng(0)
    depth = rng.uniform(0.5, 2.0, size=(12, 16))
    depth[3, 4] = 0.0  # invalid sample
    pts, valid = backproject(depth, K)
    assert not valid[3, 4] and np.all(pts[3, 4] == 0)
    vs, us = np.nonzero(valid)
    uv = project(pts[vs, us], K)
    assert np.allclose(uv[:, 0], us, atol=1e-9)
    assert np.allclose(uv[:, 1], vs, atol=1e-9)
    assert np.allclose(pts[vs, us, 2], depth[vs, us])


def test_projection_jacobian_matches_finite_differences():
    rng = np.random.default_rng(1)
    pts = rng.uniform([-0.3, -0.3, 0.4], [0.3, 0.3, 2.0], size=(20, 3))
    J = projection_jacobian(pts, K)
    for i in range(len(pts)):
        for row in range(2):
            fd = central_diff(lambda x, r=row: project(x, K)[r], pts[i], h=1e-6)
            assert max_rel_err(J[i, row], fd) < 1e-5
