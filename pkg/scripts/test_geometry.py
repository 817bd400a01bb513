import math
import os
import sys
import unittest

import numpy as np

# Add app to path
sys.path.append(os.getcwd())

from app.models import InvalidArgumentError, ValidationError
from app.services.geometry import (
    NOVEL_POSE_RANGE, SQRT2, TRAIN_POSE_RANGE, CameraPose, Intrinsics, PoseRange, Quaternion, camera_angles,
    look_at, nqd, nqd_budget_angle, perturb_pose, sample_pose, spherical_position,
)


def random_quaternion(rng):
    v = rng.normal(size=4)
    return Quaternion.from_array(v / np.linalg.norm(v))


class TestNqd(unittest.TestCase):
    def test_identity_and_antipode_are_zero(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            q = random_quaternion(rng)
            self.assertEqual(nqd(q, q), 0.0)
            self.assertEqual(nqd(q, -q), 0.0)

    def test_matches_half_angle_formula(self):
        rng = np.random.default_rng(2)
        for _ in range(1000):
            q = random_quaternion(rng)
            theta = rng.uniform(0.0, math.pi)
            other = (q * Quaternion.from_axis_angle(rng.normal(size=3), theta)).normalized()
            self.assertAlmostEqual(nqd(q, other), 2.0 * math.sin(theta / 4.0), delta=1e-9)

    def test_half_turn_reaches_sqrt2(self):
        q = Quaternion.identity()
        flipped = Quaternion.from_axis_angle((0.0, 0.0, 1.0), math.pi)
        self.assertAlmostEqual(nqd(q, flipped), SQRT2, places=12)

    def test_symmetric_and_bounded(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            a, b = random_quaternion(rng), random_quaternion(rng)
            self.assertEqual(nqd(a, b), nqd(b, a))
            self.assertLessEqual(nqd(a, b), SQRT2 + 1e-12)

    def test_rejects_non_unit(self):
        with self.assertRaises(InvalidArgumentError):
            nqd(Quaternion(2.0, 0.0, 0.0, 0.0), Quaternion.identity())

    def test_budget_angle(self):
        self.assertAlmostEqual(nqd_budget_angle(SQRT2), math.pi)
        self.assertEqual(nqd_budget_angle(0.0), 0.0)


class TestQuaternion(unittest.TestCase):
    def test_matrix_round_trip(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            q = random_quaternion(rng)
            back = Quaternion.from_matrix(q.to_matrix())
            self.assertLess(nqd(q, back), 1e-9)

    def test_matrix_is_rotation(self):
        m = Quaternion.from_axis_angle((1.0, 2.0, 3.0), 0.7).to_matrix()
        np.testing.assert_allclose(m @ m.T, np.eye(3), atol=1e-12)
        self.assertAlmostEqual(np.linalg.det(m), 1.0, places=12)

    def test_antipodes_share_matrix(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            q = random_quaternion(rng)
            np.testing.assert_array_equal(q.to_matrix(), (-q).to_matrix())

    def test_axis_angle_needs_axis(self):
        with self.assertRaises(InvalidArgumentError):
            Quaternion.from_axis_angle((0.0, 0.0, 0.0), 1.0)


class TestCamera(unittest.TestCase):
    def test_look_at_centres_target(self):
        position = spherical_position(45.0, 30.0, 6.0)
        pose = CameraPose(orientation=look_at(position), position=position, intrinsics=Intrinsics.from_fov(128))
        u, v, z = pose.project(np.zeros((1, 3)))[0]
        self.assertAlmostEqual(u, 64.0, places=9)
        self.assertAlmostEqual(v, 64.0, places=9)
        self.assertAlmostEqual(z, 6.0, places=9)

    def test_world_up_projects_upwards(self):
        position = spherical_position(20.0, 0.0, 5.0)
        pose = CameraPose(orientation=look_at(position), position=position)
        above = pose.project(np.array([[0.0, 0.0, 0.5]]))[0]
        self.assertLess(above[1], 64.0)

    def test_pose_dict_round_trip(self):
        rng = np.random.default_rng(5)
        pose = sample_pose(TRAIN_POSE_RANGE, rng)
        self.assertTrue(CameraPose.from_dict(pose.to_dict()).same_pose(pose))

    def test_non_unit_orientation_rejected(self):
        with self.assertRaises(ValidationError):
            CameraPose(orientation=Quaternion(1.0, 1.0, 0.0, 0.0), position=(0.0, 0.0, 5.0))

    def test_focal_from_fov(self):
        k = Intrinsics.from_fov(128, 90.0)
        self.assertAlmostEqual(k.focal, 64.0)
        self.assertEqual((k.cx, k.cy), (64.0, 64.0))


class TestPoseSampling(unittest.TestCase):
    def test_samples_stay_in_range(self):
        rng = np.random.default_rng(6)
        for pose_range in (TRAIN_POSE_RANGE, NOVEL_POSE_RANGE):
            for _ in range(200):
                pose = sample_pose(pose_range, rng)
                elevation, azimuth = camera_angles(pose)
                self.assertTrue(pose_range.contains(elevation, azimuth), (elevation, azimuth))

    def test_train_and_novel_disjoint(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            elevation, azimuth = camera_angles(sample_pose(NOVEL_POSE_RANGE, rng))
            self.assertFalse(TRAIN_POSE_RANGE.contains(elevation, azimuth))

    def test_empty_interval_rejected(self):
        with self.assertRaises(ValueError):
            PoseRange(elevation=[(50.0, 40.0)], azimuth=[(0.0, 10.0)], distance=[(3.0, 4.0)])

    def test_same_seed_same_pose(self):
        a = sample_pose(TRAIN_POSE_RANGE, np.random.default_rng(8))
        b = sample_pose(TRAIN_POSE_RANGE, np.random.default_rng(8))
        self.assertTrue(a.same_pose(b))


class TestPerturbPose(unittest.TestCase):
    def setUp(self):
        self.base = sample_pose(TRAIN_POSE_RANGE.scaled_distance(2.0), np.random.default_rng(9))

    def test_zero_budget_keeps_pose(self):
        out = perturb_pose(self.base, 0.0, np.random.default_rng(10))
        self.assertTrue(out.same_pose(self.base))

    def test_budget_respected(self):
        rng = np.random.default_rng(11)
        for budget in (0.05, 0.1, 0.4, SQRT2):
            for _ in range(200):
                out = perturb_pose(self.base, budget, rng)
                self.assertLessEqual(nqd(self.base.orientation, out.orientation), budget)

    def test_position_jitter_bounded(self):
        rng = np.random.default_rng(12)
        distance = float(np.linalg.norm(self.base.position))
        for _ in range(100):
            out = perturb_pose(self.base, 0.1, rng, position_jitter=0.05)
            offset = np.linalg.norm(np.subtract(out.position, self.base.position))
            self.assertLessEqual(offset, 0.05 * distance + 1e-12)

    def test_budget_out_of_range(self):
        with self.assertRaises(InvalidArgumentError):
            perturb_pose(self.base, 1.5, np.random.default_rng(0))


if __name__ == "__main__":
    unittest.main()
