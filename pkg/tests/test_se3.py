import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from robustpgo import se3


def rand_pose(rng):
    xi = np.concatenate([rng.uniform(-1.5, 1.5, 3), rng.uniform(-5.0, 5.0, 3)])
    return se3.exp(xi)


def assert_poses_close(a, b, tol=1e-9):
    rot, trans = se3.pose_difference(a, b)
    assert rot < tol and trans < tol


twists = st.lists(
    st.floats(-1.5, 1.5, allow_nan=False, allow_infinity=False), min_size=6, max_size=6
).map(np.array)


class TestTransformPoint:
    def test_identity(self):
        p = np.array([1.0, 2.0, 3.0])
        np.testing.assert_array_equal(se3.transform_point(se3.identity(), p), p)

    def test_z_rotation_axis_symmetry(self):
        T = se3.exp([0.0, 0.0, math.pi / 2, 0.0, 0.0, 0.0])
        np.testing.assert_allclose(
            se3.transform_point(T, [1.0, 0.0, 0.0]), [0.0, 1.0, 0.0], atol=1e-12
        )

    def test_hand_evaluated_rotation_plus_translation(self):
        # 180 deg about x maps (0,1,0) to (0,-1,0); translation (1,1,1) gives (1,0,1)
        T = se3.Pose(np.array([0.0, 1.0, 0.0, 0.0]), np.array([1.0, 1.0, 1.0]))
        np.testing.assert_allclose(
            se3.transform_point(T, [0.0, 1.0, 0.0]), [1.0, 0.0, 1.0], atol=1e-12
        )


class TestCompose:
    def test_identity_neutral(self):
        rng = np.random.default_rng(0)
        P = rand_pose(rng)
        assert_poses_close(se3.compose(se3.identity(), P), P)
        assert_poses_close(se3.compose(P, se3.identity()), P)

    def test_inverse_law(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            P = rand_pose(rng)
            assert_poses_close(se3.compose(P, se3.inverse(P)), se3.identity())

    def test_two_quarter_turns_make_half_turn(self):
        # quaternion product of two 90-deg z-rotations is (0, 0, 0, 1)
        Tz90 = se3.exp([0.0, 0.0, math.pi / 2, 0.0, 0.0, 0.0])
        T = se3.compose(Tz90, Tz90)
        np.testing.assert_allclose(T.quat, [0.0, 0.0, 0.0, 1.0], atol=1e-12)

    @given(twists, twists, twists)
    @settings(max_examples=60, deadline=None)
    def test_associativity(self, a, b, c):
        A, B, C = se3.exp(a), se3.exp(b), se3.exp(c)
        assert_poses_close(se3.compose(se3.compose(A, B), C), se3.compose(A, se3.compose(B, C)))

    @given(twists, twists)
    @settings(max_examples=60, deadline=None)
    def test_compose_matches_chained_transform(self, a, b):
        A, B = se3.exp(a), se3.exp(b)
        p = np.array([0.7, -1.3, 2.1])
        np.testing.assert_allclose(
            se3.transform_point(se3.compose(A, B), p),
            se3.transform_point(A, se3.transform_point(B, p)),
            atol=1e-9,
        )


class TestExpLog:
    def test_exp_zero_is_identity(self):
        T = se3.exp(np.zeros(6))
        np.testing.assert_array_equal(T.quat, [1.0, 0.0, 0.0, 0.0])
        np.testing.assert_array_equal(T.trans, [0.0, 0.0, 0.0])

    def test_exp_axis_angle(self):
        T = se3.exp([0.0, 0.0, math.pi / 2, 0.0, 0.0, 0.0])
        half = math.pi / 4
        np.testing.assert_allclose(T.quat, [math.cos(half), 0.0, 0.0, math.sin(half)], atol=1e-12)

    def test_round_trip_random(self):
        rng = np.random.default_rng(2)
        for _ in range(300):
            xi = np.concatenate([rng.uniform(-2.0, 2.0, 3), rng.uniform(-10.0, 10.0, 3)])
            if np.linalg.norm(xi[:3]) >= math.pi - 1e-3:
                continue
            np.testing.assert_allclose(se3.log(se3.exp(xi)), xi, atol=1e-9)

    def test_round_trip_small_angles(self):
        rng = np.random.default_rng(3)
        for scale in (1e-3, 1e-6, 1e-9):
            xi = np.concatenate([scale * rng.uniform(-1, 1, 3), rng.uniform(-1, 1, 3)])
            np.testing.assert_allclose(se3.log(se3.exp(xi)), xi, atol=1e-12)

    def test_log_flags_near_pi(self):
        xi = np.array([math.pi - 1e-8, 0.0, 0.0, 0.0, 0.0, 0.0])
        _, flagged = se3.log_flagged(se3.exp(xi))
        assert flagged

    def test_log_not_flagged_away_from_pi(self):
        xi = np.array([0.0, 2.0, 0.0, 1.0, 0.0, 0.0])
        _, flagged = se3.log_flagged(se3.exp(xi))
        assert not flagged


class TestRetract:
    def test_zero_retract_is_exact(self):
        rng = np.random.default_rng(4)
        T = rand_pose(rng)
        T2 = se3.retract(T, np.zeros(6))
        np.testing.assert_array_equal(T.quat, T2.quat)
        np.testing.assert_array_equal(T.trans, T2.trans)

    def test_matches_left_composition(self):
        rng = np.random.default_rng(5)
        T = rand_pose(rng)
        d = rng.uniform(-0.5, 0.5, 6)
        assert_poses_close(se3.retract(T, d), se3.compose(se3.exp(d), T))


class TestQuaternionInvariants:
    def test_unit_norm_after_operations(self):
        rng = np.random.default_rng(6)
        T = rand_pose(rng)
        for _ in range(100):
            T = se3.compose(T, rand_pose(rng))
            assert abs(np.linalg.norm(T.quat) - 1.0) < 1e-9

    def test_hemisphere_normalization(self):
        q = np.array([-0.5, 0.5, 0.5, 0.5])
        P = se3.Pose(q, np.zeros(3))
        assert P.quat[0] >= 0.0
        np.testing.assert_allclose(P.quat, [0.5, -0.5, -0.5, -0.5])

    def test_matrix_quat_round_trip(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            T = rand_pose(rng)
            R = T.rotation_matrix()
            np.testing.assert_allclose(se3.matrix_to_quat(R), T.quat, atol=1e-9)

    def test_zero_quaternion_rejected(self):
        with pytest.raises(ValueError):
            se3.Pose(np.zeros(4), np.zeros(3))
