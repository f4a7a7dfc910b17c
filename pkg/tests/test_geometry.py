"""Core geometry: group axioms, exp/log round trips, interpolation, NN search."""

import numpy as np
import pytest

from stretchslam.geometry import (
    NnIndex,
    Pose,
    Trajectory,
    nn_index_build,
    nn_query,
    pose_distance,
    pose_interpolate,
    rotation_exp,
    rotation_log,
)


def random_pose(rng):
    return Pose(rotation_exp(rng.uniform(-np.pi, np.pi, 3) * rng.uniform(0, 1)),
                rng.normal(0, 2.0, 3))


def brute_force_knn(cloud, query, k):
    """Independent oracle: exhaustive scan, ties broken by lowest id."""
    d = np.linalg.norm(cloud - query, axis=1)
    order = np.lexsort((np.arange(len(cloud)), d))
    return order[: min(k, len(cloud))]


class TestRotation:
    def test_exp_zero_is_identity(self):
        assert np.allclose(rotation_exp(np.zeros(3)), np.eye(3))

    def test_quarter_turn_about_z(self):
        R = rotation_exp([0.0, 0.0, np.pi / 2])
        assert np.allclose(R @ np.array([1.0, 0.0, 0.0]), [0.0, 1.0, 0.0], atol=1e-12)

    def test_log_exp_round_trip(self):
        rng = np.random.default_rng(7)
        for _ in range(1000):
            v = rng.normal(0, 1.0, 3)
            v *= rng.uniform(0.0, 2.999) / max(np.linalg.norm(v), 1e-12)
            assert np.allclose(rotation_log(rotation_exp(v)), v, atol=1e-9)

    def test_log_near_pi(self):
        for axis in (np.array([1.0, 0, 0]), np.array([0, 1.0, 0]),
                     np.array([1.0, 1.0, 0]) / np.sqrt(2)):
            v = (np.pi - 1e-9) * axis
            R = rotation_exp(v)
            back = rotation_log(R)
            assert np.allclose(rotation_exp(back), R, atol=1e-7)

    def test_exp_output_is_rotation(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            R = rotation_exp(rng.normal(0, 2, 3))
            assert np.allclose(R.T @ R, np.eye(3), atol=1e-12)
            assert abs(np.linalg.det(R) - 1.0) < 1e-12


class TestPose:
    def test_group_axioms(self):
        rng = np.random.default_rng(11)
        for _ in range(200):
            a, b, c = (random_pose(rng) for _ in range(3))
            lhs = a.compose(b).compose(c)
            rhs = a.compose(b.compose(c))
            assert np.allclose(lhs.rotation, rhs.rotation, atol=1e-9)
            assert np.allclose(lhs.translation, rhs.translation, atol=1e-9)
            ident = a.inverse().compose(a)
            assert np.allclose(ident.rotation, np.eye(3), atol=1e-9)
            assert np.allclose(ident.translation, 0.0, atol=1e-9)

    def test_apply_matches_compose(self):
        rng = np.random.default_rng(4)
        a, b = random_pose(rng), random_pose(rng)
        p = rng.normal(0, 1, (10, 3))
        assert np.allclose(a.compose(b).apply(p), a.apply(b.apply(p)), atol=1e-12)


class TestPoseInterpolate:
    def test_endpoints(self):
        rng = np.random.default_rng(5)
        a, b = random_pose(rng), random_pose(rng)
        for alpha, ref in ((0.0, a), (1.0, b)):
            out = pose_interpolate(a, b, alpha)
            assert pose_distance(out, ref) == (pytest.approx(0.0, abs=1e-12),
                                               pytest.approx(0.0, abs=1e-12))

    def test_translation_midpoint(self):
        out = pose_interpolate(Pose.identity(), Pose(np.eye(3), [2.0, 0, 0]), 0.5)
        assert np.allclose(out.translation, [1.0, 0, 0])
        assert np.allclose(out.rotation, np.eye(3))

    def test_alpha_out_of_range(self):
        with pytest.raises(ValueError):
            pose_interpolate(Pose.identity(), Pose.identity(), 1.5)

    def test_frame_consistency(self):
        rng = np.random.default_rng(6)
        for _ in range(50):
            a, b, g = (random_pose(rng) for _ in range(3))
            alpha = rng.uniform(0, 1)
            lhs = pose_interpolate(g.compose(a), g.compose(b), alpha)
            rhs = g.compose(pose_interpolate(a, b, alpha))
            dt, dr = pose_distance(lhs, rhs)
            assert dt < 1e-9 and dr < 1e-9


class TestNnIndex:
    def test_two_point_cloud(self):
        idx = nn_index_build(np.array([[0.0, 0, 0], [1.0, 0, 0]]))
        assert nn_query(idx, [0.1, 0, 0], 1)[0] == 0

    def test_query_on_cloud_point(self):
        cloud = np.array([[0.0, 0, 0], [1.0, 2, 3], [4.0, 5, 6]])
        idx = nn_index_build(cloud)
        d, i = idx.query(np.array([[1.0, 2, 3]]), k=1)
        assert i[0, 0] == 1 and d[0, 0] == 0.0

    def test_matches_brute_force(self):
        rng = np.random.default_rng(12)
        cloud = rng.uniform(-1, 1, (500, 3))
        idx = nn_index_build(cloud)
        for _ in range(50):
            q = rng.uniform(-1, 1, 3)
            assert np.array_equal(nn_query(idx, q, 5), brute_force_knn(cloud, q, 5))

    def test_k_exceeds_cloud(self):
        cloud = np.array([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0]])
        idx = nn_index_build(cloud)
        assert len(nn_query(idx, [0.0, 0, 0], 10)) == 3

    def test_tie_broken_by_lowest_id(self):
        # Four points equidistant from the origin; ids 0 and 1 must win.
        cloud = np.array([[1.0, 0, 0], [-1.0, 0, 0], [0, 1.0, 0], [0, -1.0, 0]])
        idx = nn_index_build(cloud)
        assert np.array_equal(nn_query(idx, [0.0, 0, 0], 2), [0, 1])

    def test_randomized_ties(self):
        rng = np.random.default_rng(13)
        # Integer grid makes exact ties common.
        cloud = rng.integers(0, 3, (60, 3)).astype(float)
        cloud = np.unique(cloud, axis=0)
        idx = nn_index_build(cloud)
        for _ in range(40):
            q = rng.integers(0, 3, 3).astype(float)
            k = int(rng.integers(1, 6))
            assert np.array_equal(nn_query(idx, q, k), brute_force_knn(cloud, q, k))

    def test_empty_cloud_rejected(self):
        with pytest.raises(ValueError):
            nn_index_build(np.zeros((0, 3)))


class TestTrajectory:
    def test_strictly_increasing_enforced(self):
        with pytest.raises(ValueError):
            Trajectory(np.array([0.0, 0.0]), np.stack([np.eye(3)] * 2),
                       np.zeros((2, 3)), np.zeros((2, 3)))

    def test_interpolation_hits_nodes(self):
        rng = np.random.default_rng(8)
        times = np.arange(5) * 0.01
        rots = np.stack([rotation_exp(rng.normal(0, 0.3, 3)) for _ in range(5)])
        traj = Trajectory(times, rots, rng.normal(0, 1, (5, 3)), np.zeros((5, 3)))
        R, p, clamped = traj.interpolate_poses(times)
        assert clamped == 0
        assert np.allclose(R, traj.rotations, atol=1e-12)
        assert np.allclose(p, traj.positions, atol=1e-12)

    def test_clamping_counts(self):
        traj = Trajectory(np.array([0.0, 1.0]), np.stack([np.eye(3)] * 2),
                          np.zeros((2, 3)), np.zeros((2, 3)))
        _, _, clamped = traj.interpolate_poses(np.array([-0.5, 0.5, 1.5]))
        assert clamped == 2

    def test_concatenate_drops_duplicate_boundary(self):
        a = Trajectory(np.array([0.0, 0.1]), np.stack([np.eye(3)] * 2),
                       np.zeros((2, 3)), np.zeros((2, 3)))
        b = Trajectory(np.array([0.1, 0.2]), np.stack([np.eye(3)] * 2),
                       np.ones((2, 3)), np.zeros((2, 3)))
        merged = a.concatenate(b)
        assert np.allclose(merged.times, [0.0, 0.1, 0.2])
