"""Geometry tests: pinhole projection, pose algebra, cloud centroids.

Expected values are computed by hand from the pinhole model
    u = fx * x / z + cx,  v = fy * y / z + cy
with poses acting as p_world = R @ p_cam + t.
"""

import math

import numpy as np
import pytest

from semmap.errors import (
    BehindCameraError,
    EmptyCloudError,
    MissingPoseError,
    NonPositiveDepthError,
)
from semmap.geometry import (
    CameraIntrinsics,
    Frame,
    Pixel,
    PointCloud,
    Pose,
    Trajectory,
    backproject,
    backproject_pixels,
    centroid,
    merge_clouds,
    project,
    quat_from_rotvec,
    quat_mul,
    quat_slerp,
    quat_to_matrix,
    rotvec_from_quat,
)


def _k():
    return CameraIntrinsics(fx=500.0, fy=500.0, cx=320.0, cy=240.0, width=640, height=480)


def _random_pose(rng):
    rv = rng.normal(0.0, 0.6, 3)
    t = rng.normal(0.0, 2.0, 3)
    return Pose(quat_from_rotvec(rv), t)


class TestProjection:
    def test_optical_axis_point(self):
        # x=0, y=0, z=2 -> u = 320, v = 240 exactly
        px = project(np.array([0.0, 0.0, 2.0]), Pose.identity(), _k())
        assert px == Pixel(320.0, 240.0)

    def test_offset_point(self):
        # x=1, z=2 -> u = 500 * 1/2 + 320 = 570
        px = project(np.array([1.0, 0.0, 2.0]), Pose.identity(), _k())
        np.testing.assert_allclose(px, (570.0, 240.0), atol=1e-12)

    def test_behind_camera_raises(self):
        with pytest.raises(BehindCameraError):
            project(np.array([0.0, 0.0, -1.0]), Pose.identity(), _k())

    def test_point_at_zero_depth_raises(self):
        with pytest.raises(BehindCameraError):
            project(np.array([0.3, 0.1, 0.0]), Pose.identity(), _k())

    def test_translated_camera(self):
        # camera at (3, 0, 0) looking down +z: world (3, 0, 2) is on axis
        pose = Pose(np.array([1.0, 0.0, 0.0, 0.0]), np.array([3.0, 0.0, 0.0]))
        px = project(np.array([3.0, 0.0, 2.0]), pose, _k())
        np.testing.assert_allclose(px, (320.0, 240.0), atol=1e-12)


class TestBackprojection:
    def test_principal_point(self):
        p = backproject(Pixel(320.0, 240.0), 2.0, Pose.identity(), _k())
        np.testing.assert_allclose(p, [0.0, 0.0, 2.0], atol=1e-12)

    def test_translation_moves_result(self):
        pose = Pose(np.array([1.0, 0.0, 0.0, 0.0]), np.array([3.0, 0.0, 0.0]))
        p = backproject(Pixel(320.0, 240.0), 2.0, pose, _k())
        np.testing.assert_allclose(p, [3.0, 0.0, 2.0], atol=1e-12)

    def test_nonpositive_depth_raises(self):
        with pytest.raises(NonPositiveDepthError):
            backproject(Pixel(320.0, 240.0), 0.0, Pose.identity(), _k())
        with pytest.raises(NonPositiveDepthError):
            backproject(Pixel(320.0, 240.0), -1.0, Pose.identity(), _k())

    def test_roundtrip_random_poses(self):
        # project then backproject at the true camera depth must return
        # the input point; 100 random pose/point pairs
        rng = np.random.default_rng(7)
        k = _k()
        for _ in range(100):
            pose = _random_pose(rng)
            p_cam = np.array(
                [rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(0.5, 20.0)]
            )
            p_world = pose.transform(p_cam)
            px = project(p_world, pose, k)
            back = backproject(px, p_cam[2], pose, k)
            np.testing.assert_allclose(back, p_world, atol=1e-9)

    def test_vectorized_matches_scalar(self):
        rng = np.random.default_rng(3)
        pose = _random_pose(rng)
        k = _k()
        uv = rng.uniform([0, 0], [640, 480], size=(50, 2))
        depths = rng.uniform(0.5, 10.0, size=50)
        batch = backproject_pixels(uv, depths, pose, k)
        for i in range(50):
            single = backproject(Pixel(*uv[i]), depths[i], pose, k)
            np.testing.assert_allclose(batch[i], single, atol=1e-12)


class TestPose:
    def test_compose_inverse_is_identity(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            pose = _random_pose(rng)
            ident = pose.compose(pose.inverse())
            np.testing.assert_allclose(ident.translation, np.zeros(3), atol=1e-12)
            assert abs(abs(ident.rotation[0]) - 1.0) < 1e-12

    def test_quaternion_norm_preserved_under_long_chains(self):
        rng = np.random.default_rng(13)
        pose = Pose.identity()
        for _ in range(1000):
            pose = pose.compose(_random_pose(rng))
            assert abs(np.linalg.norm(pose.rotation) - 1.0) < 1e-9

    def test_transform_matches_matrix_form(self):
        rng = np.random.default_rng(17)
        pose = _random_pose(rng)
        pts = rng.normal(size=(20, 3))
        expected = pts @ quat_to_matrix(pose.rotation).T + pose.translation
        np.testing.assert_allclose(pose.transform(pts), expected, atol=1e-12)

    def test_exp_log_roundtrip(self):
        rng = np.random.default_rng(19)
        for _ in range(50):
            xi = rng.normal(0, 0.8, 6)
            np.testing.assert_allclose(Pose.exp(xi).log(), xi, atol=1e-9)

    def test_rotvec_quat_roundtrip(self):
        # log returns the principal branch, so only angles < pi roundtrip
        rng = np.random.default_rng(23)
        for _ in range(100):
            axis = rng.normal(0, 1.0, 3)
            axis /= np.linalg.norm(axis)
            rv = rng.uniform(0.0, math.pi - 1e-6) * axis
            np.testing.assert_allclose(rotvec_from_quat(quat_from_rotvec(rv)), rv, atol=1e-9)
        # small angle branch
        rv = np.array([1e-14, -2e-14, 0.0])
        np.testing.assert_allclose(rotvec_from_quat(quat_from_rotvec(rv)), rv, atol=1e-12)

    def test_quat_mul_matches_matrix_product(self):
        rng = np.random.default_rng(29)
        qa = quat_from_rotvec(rng.normal(0, 1, 3))
        qb = quat_from_rotvec(rng.normal(0, 1, 3))
        np.testing.assert_allclose(
            quat_to_matrix(quat_mul(qa, qb)),
            quat_to_matrix(qa) @ quat_to_matrix(qb),
            atol=1e-12,
        )


class TestCentroid:
    def test_two_point_midpoint(self):
        cloud = PointCloud(np.array([[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]]), Frame.WORLD)
        np.testing.assert_allclose(centroid(cloud), [1.0, 0.0, 0.0], atol=1e-15)

    def test_single_point(self):
        cloud = PointCloud(np.array([[1.0, 2.0, 3.0]]), Frame.WORLD)
        np.testing.assert_allclose(centroid(cloud), [1.0, 2.0, 3.0], atol=1e-15)

    def test_empty_cloud_raises(self):
        cloud = PointCloud(np.zeros((0, 3)), Frame.WORLD)
        with pytest.raises(EmptyCloudError):
            centroid(cloud)

    def test_uniform_cube_statistical(self):
        # 1000 uniform samples in the unit cube: mean of means is 0.5 per
        # axis, sd of the sample mean is sqrt(1/12)/sqrt(1000) ~ 0.009,
        # so 0.05 is a > 5 sigma bound
        rng = np.random.default_rng(101)
        cloud = PointCloud(rng.uniform(0.0, 1.0, size=(1000, 3)), Frame.WORLD)
        np.testing.assert_allclose(centroid(cloud), [0.5, 0.5, 0.5], atol=0.05)

    def test_translation_equivariance(self):
        rng = np.random.default_rng(103)
        pts = rng.normal(size=(40, 3))
        shift = np.array([4.0, -2.0, 0.5])
        c0 = centroid(PointCloud(pts, Frame.WORLD))
        c1 = centroid(PointCloud(pts + shift, Frame.WORLD))
        np.testing.assert_allclose(c1, c0 + shift, atol=1e-12)

    def test_merge_preserves_frame_and_counts(self):
        a = PointCloud(np.zeros((3, 3)), Frame.WORLD)
        b = PointCloud(np.ones((2, 3)), Frame.WORLD)
        merged = merge_clouds([a, b])
        assert len(merged) == 5
        assert merged.frame is Frame.WORLD


class TestTrajectory:
    def test_endpoints_exact(self):
        p0 = Pose.identity()
        p1 = Pose(quat_from_rotvec([0.0, 0.0, math.pi / 2]), np.array([1.0, 0.0, 0.0]))
        traj = Trajectory([0.0, 1.0], [p0, p1])
        np.testing.assert_allclose(traj.pose_at(0.0).translation, p0.translation, atol=1e-12)
        np.testing.assert_allclose(traj.pose_at(1.0).translation, p1.translation, atol=1e-12)

    def test_midpoint_interpolation(self):
        # half of a 90 degree yaw is 45 degrees; translation is linear
        p0 = Pose.identity()
        p1 = Pose(quat_from_rotvec([0.0, 0.0, math.pi / 2]), np.array([2.0, 0.0, 0.0]))
        traj = Trajectory([0.0, 1.0], [p0, p1])
        mid = traj.pose_at(0.5)
        np.testing.assert_allclose(mid.translation, [1.0, 0.0, 0.0], atol=1e-12)
        np.testing.assert_allclose(
            rotvec_from_quat(mid.rotation), [0.0, 0.0, math.pi / 4], atol=1e-12
        )

    def test_outside_range_raises(self):
        traj = Trajectory([0.0, 1.0], [Pose.identity(), Pose.identity()])
        with pytest.raises(MissingPoseError):
            traj.pose_at(-0.5)
        with pytest.raises(MissingPoseError):
            traj.pose_at(1.5)

    def test_nonmonotone_stamps_rejected(self):
        with pytest.raises(ValueError):
            Trajectory([0.0, 0.0], [Pose.identity(), Pose.identity()])

    def test_slerp_consistent_with_quat_slerp(self):
        rng = np.random.default_rng(31)
        qa = quat_from_rotvec(rng.normal(0, 1, 3))
        qb = quat_from_rotvec(rng.normal(0, 1, 3))
        traj = Trajectory([0.0, 1.0], [Pose(qa, np.zeros(3)), Pose(qb, np.zeros(3))])
        got = traj.pose_at(0.25).rotation
        want = quat_slerp(qa, qb, 0.25)
        assert min(np.linalg.norm(got - want), np.linalg.norm(got + want)) < 1e-12
