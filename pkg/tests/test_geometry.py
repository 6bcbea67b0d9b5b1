import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from vasplat.errors import DegeneratePlane, InvalidCamera, NonPositiveDepth, PointAtInfinity
from vasplat.geometry import (CameraIntrinsics, CameraPose, backproject, homography, project, relative_pose,
                              warp_pixel)

from conftest import random_camera, simple_camera
from oracles import homography_fuzz, reproject_through_plane

seeds = st.integers(0, 2**32 - 1)


def test_project_principal_ray():
    pix, z = project([0, 0, 5], simple_camera())
    assert np.allclose(pix, [64, 64]) and z == 5


def test_project_pinhole_offset():
    pix, z = project([1, 0, 5], simple_camera())
    assert np.allclose(pix, [84, 64]) and z == 5


def test_project_rejects_points_behind():
    with pytest.raises(NonPositiveDepth):
        project([0, 0, -1], simple_camera())
    with pytest.raises(NonPositiveDepth):
        project([0, 0, 0], simple_camera())


@given(seeds)
@settings(max_examples=60, deadline=None)
def test_project_matches_matrix_oracle(seed):
    rng = np.random.default_rng(seed)
    cam = random_camera(rng)
    xc = np.array([*rng.uniform(-1, 1, 2), rng.uniform(0.5, 10)])
    X = cam.pose.R_wc @ xc + cam.pose.t_c
    # independent oracle: full 3x4 projection matrix P = K [R^T | -R^T t]
    P = cam.K @ np.c_[cam.pose.R_wc.T, -cam.pose.R_wc.T @ cam.pose.t_c]
    h = P @ np.r_[X, 1.0]
    pix, z = project(X, cam)
    assert np.allclose(pix, h[:2] / h[2], rtol=1e-9, atol=1e-9)
    assert z == pytest.approx(h[2], rel=1e-9)


def test_backproject_examples():
    cam = simple_camera()
    assert np.allclose(backproject((64, 64), 5, cam), [0, 0, 5])
    assert np.allclose(backproject((84, 64), 5, cam), [1, 0, 5])
    with pytest.raises(NonPositiveDepth):
        backproject((1, 1), 0.0, cam)


@given(seeds)
@settings(max_examples=100, deadline=None)
def test_project_backproject_roundtrip(seed):
    rng = np.random.default_rng(seed)
    cam = random_camera(rng)
    pix = rng.uniform(0, [cam.width, cam.height])
    z = rng.uniform(0.1, 50)
    xw = cam.pose.to_world(backproject(pix, z, cam))
    p2, z2 = project(xw, cam)
    assert np.max(np.abs(p2 - pix)) < 1e-9
    assert abs(z2 - z) < 1e-9 * z
    # and the other way round
    back = cam.pose.to_world(backproject(p2, z2, cam))
    assert np.max(np.abs(back - xw)) < 1e-9 * max(1.0, np.abs(xw).max())


def test_intrinsics_and_pose_validation():
    with pytest.raises(InvalidCamera):
        CameraIntrinsics(0.0, 1.0, 5.0, 5.0, 10, 10)
    with pytest.raises(InvalidCamera):
        CameraIntrinsics(1.0, 1.0, 10.0, 5.0, 10, 10)
    with pytest.raises(InvalidCamera):
        CameraPose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))


def test_extrinsic_inverse(rng):
    cam = random_camera(rng)
    M = cam.pose.extrinsic
    assert np.allclose(M @ cam.pose.extrinsic_inv, np.eye(4), atol=1e-12)


def test_relative_pose_identity():
    cam = simple_camera()
    R, T = relative_pose(cam, cam)
    assert np.allclose(R, np.eye(3)) and np.allclose(T, 0)


def test_relative_pose_translation():
    ref = simple_camera()
    src = simple_camera(t=np.array([0.1, 0.0, 0.0]))
    R, T = relative_pose(ref, src)
    assert np.allclose(R, np.eye(3))
    assert np.allclose(T, [-0.1, 0, 0], atol=1e-15)


@given(seeds)
@settings(max_examples=60, deadline=None)
def test_relative_pose_roundtrip(seed):
    rng = np.random.default_rng(seed)
    a, b = random_camera(rng), random_camera(rng)
    x_a = rng.normal(0, 3, 3)
    R, T = relative_pose(a, b)
    via_world = b.pose.to_camera(a.pose.to_world(x_a))
    assert np.max(np.abs(R @ x_a + T - via_world)) < 1e-12 * 100
    R2, T2 = relative_pose(b, a)
    assert np.allclose(R2 @ R, np.eye(3), atol=1e-12)
    assert np.allclose(R2 @ T + T2, 0, atol=1e-12)


def test_homography_same_camera_is_identity():
    cam = simple_camera()
    H = homography(cam, cam, [0, 0, 1], 2.0)
    assert np.allclose(H, np.eye(3))
    assert np.allclose(warp_pixel(H, (10, 20)), (10, 20))


def test_homography_baseline_example():
    ref = simple_camera()
    src = simple_camera(t=np.array([0.1, 0.0, 0.0]))
    n, d = np.array([0.0, 0.0, 1.0]), 2.0
    H = homography(ref, src, n, d)
    for pix in [(64, 64), (10, 100), (120, 3)]:
        assert np.max(np.abs(warp_pixel(H, pix) - reproject_through_plane(ref, src, n, d, pix))) < 1e-6


def test_homography_tilted_plane():
    rng = np.random.default_rng(5)
    ref = simple_camera()
    R = Rotation.from_euler("y", 30, degrees=True).as_matrix()
    src = simple_camera(R=Rotation.from_euler("y", 3, degrees=True).as_matrix(), t=rng.normal(0, 0.2, 3))
    n = R @ np.array([0.0, 0.0, 1.0])
    H = homography(ref, src, n, 3.0)
    for pix in rng.uniform(0, 128, (20, 2)):
        assert np.max(np.abs(warp_pixel(H, pix) - reproject_through_plane(ref, src, n, 3.0, pix))) < 1e-6


def test_homography_errors():
    cam = simple_camera()
    with pytest.raises(DegeneratePlane):
        homography(cam, cam, [0, 0, 1], 0.0)
    with pytest.raises(DegeneratePlane):
        homography(cam, cam, [0, 0, 2], 1.0)


def test_warp_pixel_examples():
    assert np.allclose(warp_pixel(np.eye(3), (3, 7)), (3, 7))
    assert np.allclose(warp_pixel(np.diag([2.0, 2, 1]), (3, 7)), (6, 14))
    assert np.allclose(warp_pixel(np.diag([1.0, 1, 2]), (3, 7)), (1.5, 3.5))
    with pytest.raises(PointAtInfinity):
        warp_pixel(np.diag([1.0, 1, 0]), (3, 7))


def test_homography_fuzz_agreement():
    assert homography_fuzz(1000) < 1e-6
