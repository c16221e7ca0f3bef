"""Pose graph: factor Jacobians against central differences, LM solver
behavior on satisfiable and inconsistent graphs."""

import math

import numpy as np
import pytest

from semmap.association import AssociationConfig, Landmark, LandmarkMap
from semmap.errors import SingularSystemError, UnknownNodeError
from semmap.geometry import CameraIntrinsics, PointCloud, Frame, Pose, quat_from_rotvec
from semmap.posegraph import (
    OptimizerConfig,
    PoseGraph,
    apply_correction,
    observation_residual_jacobians,
    odometry_residual_jacobians,
    prior_residual_jacobian,
)

K = CameraIntrinsics(fx=500.0, fy=500.0, cx=320.0, cy=240.0, width=640, height=480)


def _random_pose(rng, rot_scale=1.0, t_scale=2.0):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0.0, rot_scale)
    return Pose(
        rotation=quat_from_rotvec(axis * angle),
        translation=rng.normal(scale=t_scale, size=3),
    )


def _num_jac_pose(fn, pose, dim_out, h=1e-6):
    """Central differences through the right retraction."""
    j = np.zeros((dim_out, 6))
    for k in range(6):
        step = np.zeros(6)
        step[k] = h
        j[:, k] = (fn(pose.retract(step)) - fn(pose.retract(-step))) / (2.0 * h)
    return j


def _num_jac_point(fn, point, dim_out, h=1e-6):
    j = np.zeros((dim_out, 3))
    for k in range(3):
        step = np.zeros(3)
        step[k] = h
        j[:, k] = (fn(point + step) - fn(point - step)) / (2.0 * h)
    return j


def _rel_err(analytic, numeric):
    scale = max(float(np.max(np.abs(analytic))), 1.0)
    return float(np.max(np.abs(analytic - numeric))) / scale


class TestOdometryJacobians:
    def test_matches_central_differences(self):
        rng = np.random.default_rng(7)
        for _ in range(30):
            pose_i = _random_pose(rng)
            pose_j = _random_pose(rng)
            # measurement near the estimated relative motion keeps the
            # rotation residual well inside the principal log branch
            meas = pose_i.inverse().compose(pose_j).compose(_random_pose(rng, 0.2, 0.1))
            _, j_i, j_j = odometry_residual_jacobians(pose_i, pose_j, meas)
            num_i = _num_jac_pose(
                lambda p: odometry_residual_jacobians(p, pose_j, meas)[0], pose_i, 6
            )
            num_j = _num_jac_pose(
                lambda p: odometry_residual_jacobians(pose_i, p, meas)[0], pose_j, 6
            )
            assert _rel_err(j_i, num_i) < 1e-6
            assert _rel_err(j_j, num_j) < 1e-6

    def test_zero_residual_at_exact_measurement(self):
        rng = np.random.default_rng(8)
        pose_i = _random_pose(rng)
        pose_j = _random_pose(rng)
        meas = pose_i.inverse().compose(pose_j)
        r, _, _ = odometry_residual_jacobians(pose_i, pose_j, meas)
        np.testing.assert_allclose(r, np.zeros(6), atol=1e-12)


class TestPriorJacobian:
    def test_matches_central_differences(self):
        rng = np.random.default_rng(9)
        for _ in range(30):
            pose = _random_pose(rng)
            prior = pose.compose(_random_pose(rng, 0.3, 0.2))
            _, j = prior_residual_jacobian(pose, prior)
            num = _num_jac_pose(
                lambda p: prior_residual_jacobian(p, prior)[0], pose, 6
            )
            assert _rel_err(j, num) < 1e-6


class TestObservationJacobians:
    def _setup(self, rng):
        pose = _random_pose(rng)
        p_cam = np.array(
            [rng.uniform(-1.5, 1.5), rng.uniform(-1.0, 1.0), rng.uniform(1.0, 8.0)]
        )
        landmark = pose.rotation_matrix() @ p_cam + pose.translation
        pixel = np.array([K.fx * p_cam[0] / p_cam[2] + K.cx,
                          K.fy * p_cam[1] / p_cam[2] + K.cy])
        pixel += rng.normal(scale=3.0, size=2)
        return pose, landmark, pixel

    def test_matches_central_differences(self):
        rng = np.random.default_rng(10)
        for _ in range(30):
            pose, landmark, pixel = self._setup(rng)
            _, j_pose, j_lm = observation_residual_jacobians(pose, landmark, pixel, K)
            num_pose = _num_jac_pose(
                lambda p: observation_residual_jacobians(p, landmark, pixel, K)[0],
                pose, 2,
            )
            num_lm = _num_jac_point(
                lambda l: observation_residual_jacobians(pose, l, pixel, K)[0],
                landmark, 2,
            )
            assert _rel_err(j_pose, num_pose) < 1e-6
            assert _rel_err(j_lm, num_lm) < 1e-6

    def test_behind_camera_returns_none(self):
        pose = Pose.identity()
        assert observation_residual_jacobians(pose, np.array([0.0, 0.0, -1.0]),
                                              np.array([320.0, 240.0]), K) is None

    def test_residual_zero_at_exact_projection(self):
        pose = Pose.identity()
        out = observation_residual_jacobians(
            pose, np.array([0.5, 0.0, 2.0]), np.array([445.0, 240.0]), K
        )
        # u = 500 * 0.5/2 + 320 = 445, v = 240
        np.testing.assert_allclose(out[0], np.zeros(2), atol=1e-12)


def _circle_scene(n_poses=10, n_landmarks=6, radius=3.0):
    """Poses on a circle looking inward, landmarks near the center."""
    rng = np.random.default_rng(42)
    poses = []
    for i in range(n_poses):
        a = 2.0 * math.pi * i / n_poses
        center = np.array([radius * math.cos(a), radius * math.sin(a), 0.0])
        forward = -center / np.linalg.norm(center)
        up = np.array([0.0, 0.0, 1.0])
        right = np.cross(forward, up)
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        rot = np.column_stack([right, down, forward])
        from semmap.geometry import quat_from_matrix

        poses.append(Pose(rotation=quat_from_matrix(rot), translation=center))
    landmarks = rng.uniform(-0.8, 0.8, size=(n_landmarks, 3))
    return poses, landmarks


def _pixel_of(pose, point):
    p = pose.rotation_matrix().T @ (point - pose.translation)
    return np.array([K.fx * p[0] / p[2] + K.cx, K.fy * p[1] / p[2] + K.cy])


def _build_consistent_graph(perturb_scale=0.0, seed=0):
    poses, landmarks = _circle_scene()
    rng = np.random.default_rng(seed)
    g = PoseGraph(K)
    g.add_prior(0, poses[0])
    for i in range(1, len(poses)):
        rel = poses[i - 1].inverse().compose(poses[i])
        g.add_odometry(i - 1, i, rel)
    obs_info = np.eye(2) / 16.0
    for lid, point in enumerate(landmarks):
        for pid in range(0, len(poses), 2):
            g.add_observation(pid, lid, _pixel_of(poses[pid], point), obs_info,
                              landmark_position=point)
    if perturb_scale > 0.0:
        for pid in list(g.poses)[1:]:
            g.poses[pid] = g.poses[pid].retract(rng.normal(scale=perturb_scale, size=6))
        for lid in g.landmarks:
            g.landmarks[lid] = g.landmarks[lid] + rng.normal(scale=perturb_scale, size=3)
    return g, poses, landmarks


class TestOptimize:
    def test_exactly_satisfiable_graph_reaches_zero_cost(self):
        g, poses, landmarks = _build_consistent_graph(perturb_scale=0.02)
        report = g.optimize()
        assert report.converged
        assert report.final_cost < 1e-12
        for pid, truth in enumerate(poses):
            err = truth.inverse().compose(g.poses[pid])
            assert np.linalg.norm(err.translation) < 1e-6
        for lid, truth in enumerate(landmarks):
            np.testing.assert_allclose(g.landmarks[lid], truth, atol=1e-6)

    def test_accepted_costs_strictly_decrease(self):
        g, _, _ = _build_consistent_graph(perturb_scale=0.05, seed=3)
        report = g.optimize()
        trace = report.cost_trace
        assert len(trace) >= 2
        assert all(b < a for a, b in zip(trace, trace[1:]))
        assert report.initial_cost == trace[0]
        assert report.final_cost == pytest.approx(trace[-1])

    def test_inconsistent_pair_closed_form(self):
        # pose 0 pinned at identity; two unit-information odometry
        # factors to pose 1 measure x = 1 and x = 2. Least squares
        # minimizes (x-1)^2 + (x-2)^2 at x = 1.5 with cost 0.5.
        g = PoseGraph(K)
        g.add_prior(0, Pose.identity())
        rel1 = Pose(rotation=np.array([1.0, 0, 0, 0]), translation=np.array([1.0, 0, 0]))
        rel2 = Pose(rotation=np.array([1.0, 0, 0, 0]), translation=np.array([2.0, 0, 0]))
        g.add_odometry(0, 1, rel1, np.eye(6))
        g.add_odometry(0, 1, rel2, np.eye(6))
        report = g.optimize()
        assert report.converged
        assert report.final_cost == pytest.approx(0.5, abs=1e-6)
        np.testing.assert_allclose(
            g.poses[1].translation, [1.5, 0.0, 0.0], atol=1e-6
        )

    def test_noisy_odometry_pulled_toward_truth_by_observations(self):
        g, poses, _ = _build_consistent_graph()
        rng = np.random.default_rng(11)
        for pid in list(g.poses)[1:]:
            g.poses[pid] = g.poses[pid].retract(rng.normal(scale=0.03, size=6))
        before = sum(
            np.linalg.norm(g.poses[pid].translation - poses[pid].translation)
            for pid in g.poses
        )
        report = g.optimize()
        after = sum(
            np.linalg.norm(g.poses[pid].translation - poses[pid].translation)
            for pid in g.poses
        )
        assert report.converged
        assert after < 0.1 * before

    def test_behind_camera_observation_deactivated_not_fatal(self):
        g, poses, _ = _build_consistent_graph()
        # extra landmark outside the circle: behind pose 0 (which looks
        # inward) but in front of the far-side cameras, whose pixels are
        # consistent with it. It stays behind pose 0 at the optimum, so
        # that factor is deactivated through convergence instead of
        # aborting the solve.
        behind = poses[0].translation * 1.5
        g.add_observation(0, 99, np.array([320.0, 240.0]), np.eye(2) / 16.0,
                          landmark_position=behind)
        g.add_observation(5, 99, _pixel_of(poses[5], behind), np.eye(2) / 16.0)
        g.add_observation(4, 99, _pixel_of(poses[4], behind), np.eye(2) / 16.0)
        report = g.optimize()
        assert report.deactivated_observations == 1
        assert report.final_cost < 1e-12

    def test_fully_deactivated_landmark_is_frozen_not_fatal(self):
        # a landmark whose every observation sits behind its camera is
        # rank-deficient only at this linearization point; damping
        # freezes it for the solve instead of aborting
        g = PoseGraph(K)
        g.add_prior(0, Pose.identity())
        g.add_observation(0, 0, np.array([320.0, 240.0]), np.eye(2),
                          landmark_position=np.array([0.0, 0.0, -2.0]))
        report = g.optimize()
        assert report.deactivated_observations == 1
        np.testing.assert_array_equal(g.landmarks[0], [0.0, 0.0, -2.0])

    def test_landmark_without_any_factor_raises(self):
        g = PoseGraph(K)
        g.add_prior(0, Pose.identity())
        g.landmarks[7] = np.array([1.0, 0.0, 3.0])
        with pytest.raises(SingularSystemError):
            g.optimize()

    def test_no_prior_raises(self):
        g = PoseGraph(K)
        g.poses[0] = Pose.identity()
        with pytest.raises(SingularSystemError):
            g.optimize()

    def test_deterministic_repeat(self):
        g1, _, _ = _build_consistent_graph(perturb_scale=0.05, seed=5)
        g2, _, _ = _build_consistent_graph(perturb_scale=0.05, seed=5)
        r1 = g1.optimize()
        r2 = g2.optimize()
        assert r1.cost_trace == r2.cost_trace
        assert r1.lambda_trace == r2.lambda_trace
        for pid in g1.poses:
            np.testing.assert_array_equal(
                g1.poses[pid].translation, g2.poses[pid].translation
            )


class TestGraphConstruction:
    def test_odometry_initializes_missing_target_by_composition(self):
        g = PoseGraph(K)
        start = Pose(rotation=quat_from_rotvec(np.array([0.0, 0.0, 0.3])),
                     translation=np.array([1.0, 2.0, 0.0]))
        g.add_prior(0, start)
        rel = Pose(rotation=np.array([1.0, 0, 0, 0]), translation=np.array([0.5, 0, 0]))
        g.add_odometry(0, 1, rel)
        expected = start.compose(rel)
        np.testing.assert_allclose(g.poses[1].translation, expected.translation)

    def test_odometry_from_unknown_pose_raises(self):
        g = PoseGraph(K)
        g.add_prior(0, Pose.identity())
        with pytest.raises(UnknownNodeError):
            g.add_odometry(3, 4, Pose.identity())

    def test_observation_from_unknown_pose_raises(self):
        g = PoseGraph(K)
        g.add_prior(0, Pose.identity())
        with pytest.raises(UnknownNodeError):
            g.add_observation(9, 0, np.array([1.0, 1.0]), np.eye(2),
                              landmark_position=np.zeros(3))

    def test_new_landmark_without_position_raises(self):
        g = PoseGraph(K)
        g.add_prior(0, Pose.identity())
        with pytest.raises(UnknownNodeError):
            g.add_observation(0, 0, np.array([1.0, 1.0]), np.eye(2))

    def test_second_prior_raises(self):
        g = PoseGraph(K)
        g.add_prior(0, Pose.identity())
        with pytest.raises(ValueError):
            g.add_prior(1, Pose.identity())

    def test_merge_landmarks_repoints_factors(self):
        g = PoseGraph(K)
        g.add_prior(0, Pose.identity())
        g.add_observation(0, 3, np.array([320.0, 240.0]), np.eye(2),
                          landmark_position=np.array([0.0, 0.0, 2.0]))
        g.add_observation(0, 7, np.array([322.0, 240.0]), np.eye(2),
                          landmark_position=np.array([0.02, 0.0, 2.0]))
        g.merge_landmarks(7, 3)
        assert set(g.landmarks) == {3}
        assert all(f.landmark_id == 3 for f in g.observations)

    def test_merge_landmarks_renames_when_survivor_absent(self):
        g = PoseGraph(K)
        g.add_prior(0, Pose.identity())
        g.add_observation(0, 7, np.array([322.0, 240.0]), np.eye(2),
                          landmark_position=np.array([0.02, 0.0, 2.0]))
        g.merge_landmarks(7, 3)
        assert set(g.landmarks) == {3}
        np.testing.assert_allclose(g.landmarks[3], [0.02, 0.0, 2.0])


class TestApplyCorrection:
    def test_registry_centroids_and_clouds_follow_graph(self):
        g = PoseGraph(K)
        g.add_prior(0, Pose.identity())
        g.add_observation(0, 0, np.array([320.0, 240.0]), np.eye(2),
                          landmark_position=np.array([0.1, 0.0, 2.0]))
        lm_map = LandmarkMap()
        cloud = PointCloud(np.array([[0.0, 0.0, 1.9], [0.0, 0.0, 2.1]]), Frame.WORLD)
        lm_map.landmarks[0] = Landmark(
            id=0, class_id="cup", centroid=np.array([0.0, 0.0, 2.0]),
            cloud=cloud, size=0.2, last_association=0.0,
        )
        apply_correction(g, lm_map)
        np.testing.assert_allclose(lm_map.landmarks[0].centroid, [0.1, 0.0, 2.0])
        np.testing.assert_allclose(
            lm_map.landmarks[0].cloud.points[:, 0], [0.1, 0.1]
        )


class TestBatchedAssembly:
    """The solver linearizes factors in stacked arrays; the per-factor
    residual functions are the oracle for that assembly."""

    def _dense_oracle(self, g, cfg, pose_ids, lm_ids):
        pose_index = {pid: 6 * i for i, pid in enumerate(pose_ids)}
        base = 6 * len(pose_ids)
        lm_index = {lid: base + 3 * i for i, lid in enumerate(lm_ids)}
        dim = base + 3 * len(lm_ids)
        h = np.zeros((dim, dim))
        grad = np.zeros(dim)
        cost = 0.0
        deactivated = 0

        def add(blocks, r, info, weight=1.0):
            w_info = info * weight
            for off_a, j_a in blocks:
                grad[off_a:off_a + j_a.shape[1]] += j_a.T @ (w_info @ r)
                for off_b, j_b in blocks:
                    hb = j_a.T @ w_info @ j_b
                    h[off_a:off_a + hb.shape[0], off_b:off_b + hb.shape[1]] += hb

        r, j = prior_residual_jacobian(g.poses[g.prior.pose_id], g.prior.pose)
        add([(pose_index[g.prior.pose_id], j)], r, g.prior.information)
        cost += float(r @ g.prior.information @ r)
        for f in g.odometry:
            r, j_i, j_j = odometry_residual_jacobians(
                g.poses[f.from_id], g.poses[f.to_id], f.rel)
            add([(pose_index[f.from_id], j_i), (pose_index[f.to_id], j_j)],
                r, f.information)
            cost += float(r @ f.information @ r)
        for f in g.observations:
            out = observation_residual_jacobians(
                g.poses[f.pose_id], g.landmarks[f.landmark_id], f.pixel, g.intrinsics)
            if out is None:
                deactivated += 1
                continue
            r, j_pose, j_lm = out
            chi2 = float(r @ f.information @ r)
            k = cfg.huber_scale_px * math.sqrt(f.information[0, 0])
            chi = math.sqrt(max(chi2, 0.0))
            if chi <= k:
                c, w = chi2, 1.0
            else:
                c, w = 2.0 * k * chi - k * k, k / chi
            add([(pose_index[f.pose_id], j_pose), (lm_index[f.landmark_id], j_lm)],
                r, f.information, weight=w)
            cost += c
        return h, grad, cost, deactivated

    def test_matches_per_factor_assembly(self):
        rng = np.random.default_rng(11)
        g, poses, landmarks = _build_consistent_graph(perturb_scale=0.4, seed=11)
        # one landmark behind its only strong view plus a far outlier
        # pixel exercises deactivation and the robust-kernel branch
        g.add_observation(0, 50, np.array([11.0, 13.0]), np.eye(2) / 16.0,
                          landmark_position=poses[0].translation * 1.5)
        g.add_observation(2, 0, np.array([900.0, -50.0]), np.eye(2) / 16.0)
        cfg = OptimizerConfig()
        pose_ids = sorted(g.poses)
        lm_ids = sorted(g.landmarks)
        static = g._prepare_factors(
            {pid: i for i, pid in enumerate(pose_ids)},
            {lid: i for i, lid in enumerate(lm_ids)},
        )
        static["prior_pos"] = pose_ids.index(g.prior.pose_id)
        q = np.stack([g.poses[p].rotation for p in pose_ids])
        t = np.stack([g.poses[p].translation for p in pose_ids])
        lm = np.stack([g.landmarks[l] for l in lm_ids])
        dim = 6 * len(pose_ids) + 3 * len(lm_ids)
        h, grad, cost, deact = g._linearize_arrays(q, t, lm, static, cfg, dim)
        h_ref, grad_ref, cost_ref, deact_ref = self._dense_oracle(
            g, cfg, pose_ids, lm_ids)
        assert deact == deact_ref == 1
        assert cost == pytest.approx(cost_ref, rel=1e-12)
        np.testing.assert_allclose(grad, grad_ref, rtol=1e-9, atol=1e-9)
        np.testing.assert_allclose(h.toarray(), h_ref, rtol=1e-9, atol=1e-9)


class TestFixedPoseSolve:
    def test_poses_pinned_landmarks_refined(self):
        g, poses, landmarks = _build_consistent_graph(perturb_scale=0.0, seed=2)
        rng = np.random.default_rng(2)
        for lid in g.landmarks:
            g.landmarks[lid] = g.landmarks[lid] + rng.normal(scale=0.3, size=3)
        before = {pid: g.poses[pid] for pid in g.poses}
        report = g.optimize(fix_poses=True)
        assert report.converged
        assert report.final_cost < 1e-12
        for pid, p in before.items():
            np.testing.assert_array_equal(g.poses[pid].translation, p.translation)
            # Pose construction renormalizes the quaternion on exit
            np.testing.assert_allclose(g.poses[pid].rotation, p.rotation, atol=1e-15)
        for lid, truth in enumerate(landmarks):
            np.testing.assert_allclose(g.landmarks[lid], truth, atol=1e-6)

    def test_no_landmarks_is_immediate_noop(self):
        g = PoseGraph(K)
        g.add_prior(0, Pose.identity())
        g.add_odometry(0, 1, Pose.exp(np.array([0.1, 0, 0, 0, 0, 0])))
        report = g.optimize(fix_poses=True)
        assert report.converged
        assert report.iterations == 0
