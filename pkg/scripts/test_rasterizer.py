import os
import sys
import unittest

import numpy as np

# Add app to path
sys.path.append(os.getcwd())

from app.models import InvalidArgumentError, RenderError, Split
from app.services.assembly import AssemblyState, load_catalog
from app.services.dataset import GenConfig, generate_pair
from app.services.geometry import CameraPose, Intrinsics, look_at, spherical_position
from app.services.rasterizer import (
    RenderParams, RenderedView, change_mask, diff_membership_mask, part_footprint, rasterize,
)


def cube_catalog():
    return load_catalog({
        "name": "cube",
        "base_part": "cube",
        "parts": [
            {"id": 1, "name": "cube", "color": [200, 80, 40],
             "boxes": [{"center": [0, 0, 0], "half_extents": [0.5, 0.5, 0.5]}]},
            {"id": 2, "name": "lid", "color": [40, 80, 200],
             "boxes": [{"center": [0, 0, 0.6], "half_extents": [0.3, 0.3, 0.1]}]},
        ],
        "adjacency": [["cube", "lid"]],
    })


def pose_at(position, target=(0.0, 0.0, 0.0), size=128):
    return CameraPose(orientation=look_at(position, target), position=tuple(position),
                      intrinsics=Intrinsics.from_fov(size))


class TestRasterize(unittest.TestCase):
    def setUp(self):
        self.catalog = cube_catalog()
        self.params = RenderParams()
        self.cube = AssemblyState(frozenset({1}), self.catalog.key)
        self.both = AssemblyState(frozenset({1, 2}), self.catalog.key)
        self.pose = pose_at(spherical_position(35.0, 25.0, 4.0))

    def test_footprint_matches_projected_corners(self):
        view = rasterize(self.catalog, self.cube, self.pose, self.params)
        uvz = self.pose.project(self.catalog.part(1).world_corners()[0])
        rows = np.flatnonzero((view.instance == 1).any(axis=1))
        cols = np.flatnonzero((view.instance == 1).any(axis=0))
        self.assertLessEqual(abs(cols[0] + 0.5 - uvz[:, 0].min()), 1.0)
        self.assertLessEqual(abs(cols[-1] + 0.5 - uvz[:, 0].max()), 1.0)
        self.assertLessEqual(abs(rows[0] + 0.5 - uvz[:, 1].min()), 1.0)
        self.assertLessEqual(abs(rows[-1] + 0.5 - uvz[:, 1].max()), 1.0)

    def test_output_types(self):
        view = rasterize(self.catalog, self.both, self.pose, self.params)
        self.assertEqual(view.rgb.shape, (128, 128, 3))
        self.assertEqual(view.rgb.dtype, np.uint8)
        self.assertEqual(view.instance.dtype, np.uint16)
        self.assertEqual(set(np.unique(view.instance)), {0, 1, 2})
        self.assertTrue(np.all(np.isinf(view.depth[view.instance == 0])))
        self.assertTrue(np.all(np.isfinite(view.depth[view.instance != 0])))

    def test_deterministic(self):
        a = rasterize(self.catalog, self.both, self.pose, self.params)
        b = rasterize(self.catalog, self.both, self.pose, self.params)
        np.testing.assert_array_equal(a.rgb, b.rgb)
        np.testing.assert_array_equal(a.instance, b.instance)

    def test_background_flat(self):
        params = RenderParams(background_gray=111)
        view = rasterize(self.catalog, self.cube, self.pose, params)
        self.assertTrue(np.all(view.rgb[view.instance == 0] == 111))

    def test_lid_occludes_cube_from_above(self):
        top = pose_at((0.01, 0.0, 5.0))
        view = rasterize(self.catalog, self.both, top, self.params)
        self.assertEqual(view.instance[64, 64], 2)

    def test_camera_inside_part(self):
        inside = pose_at((0.1, 0.0, 0.0), target=(5.0, 0.0, 0.0))
        with self.assertRaises(RenderError):
            rasterize(self.catalog, self.cube, inside, self.params)

    def test_geometry_behind_camera(self):
        away = pose_at((2.0, 0.0, 0.0), target=(5.0, 0.0, 0.0))
        with self.assertRaises(RenderError):
            rasterize(self.catalog, self.cube, away, self.params)

    def test_size_mismatch(self):
        with self.assertRaises(InvalidArgumentError):
            rasterize(self.catalog, self.cube, self.pose, RenderParams(image_size=64))

    def test_image_size_power_of_two(self):
        with self.assertRaises(ValueError):
            RenderParams(image_size=100)

    def test_part_footprint(self):
        footprint = part_footprint(self.catalog, 2, self.pose, self.params)
        view = rasterize(self.catalog, self.both, self.pose, self.params)
        # the lid sits on top, so all its visible pixels in the assembly lie inside its own footprint
        self.assertTrue(np.all(footprint[view.instance == 2] == 1))
        self.assertGreater(footprint.sum(), 0)


class TestChangeMask(unittest.TestCase):
    def setUp(self):
        self.catalog = cube_catalog()
        self.params = RenderParams()
        self.pose = pose_at(spherical_position(35.0, 25.0, 4.0))

    def test_same_view_is_empty(self):
        view = rasterize(self.catalog, AssemblyState(frozenset({1, 2}), self.catalog.key), self.pose, self.params)
        self.assertFalse(change_mask(view, view).any())

    def test_removed_lid(self):
        with_lid = rasterize(self.catalog, AssemblyState(frozenset({1, 2}), self.catalog.key), self.pose, self.params)
        without = rasterize(self.catalog, AssemblyState(frozenset({1}), self.catalog.key), self.pose, self.params)
        mask = change_mask(with_lid, without)
        np.testing.assert_array_equal(mask, (with_lid.instance == 2).astype(np.uint8))

    def test_symmetric_under_swap(self):
        with_lid = rasterize(self.catalog, AssemblyState(frozenset({1, 2}), self.catalog.key), self.pose, self.params)
        without = rasterize(self.catalog, AssemblyState(frozenset({1}), self.catalog.key), self.pose, self.params)
        np.testing.assert_array_equal(change_mask(with_lid, without), change_mask(without, with_lid))

        catalog = load_catalog()
        config = GenConfig(name="swap_check", split=Split.TRAIN, count=10, render=RenderParams(image_size=64))
        for pair_id in range(10):
            record = generate_pair(config, catalog, pair_id)
            aligned = RenderedView(rgb=record.sample.rgb, instance=record.aligned_instance,
                                   pose=record.anchor.pose, state=record.sample.state)
            np.testing.assert_array_equal(change_mask(aligned, record.anchor), record.mask)

    def test_pose_mismatch(self):
        state = AssemblyState(frozenset({1}), self.catalog.key)
        a = rasterize(self.catalog, state, self.pose, self.params)
        b = rasterize(self.catalog, state, pose_at(spherical_position(40.0, 25.0, 4.0)), self.params)
        with self.assertRaises(InvalidArgumentError):
            change_mask(a, b)

    def test_equals_diff_membership_on_generated_pairs(self):
        catalog = load_catalog()
        config = GenConfig(name="mask_check", split=Split.TRAIN, count=30, render=RenderParams(image_size=64))
        for pair_id in range(30):
            record = generate_pair(config, catalog, pair_id)
            aligned = RenderedView(rgb=record.sample.rgb, instance=record.aligned_instance,
                                   pose=record.anchor.pose, state=record.sample.state)
            np.testing.assert_array_equal(record.mask, diff_membership_mask(record.anchor, aligned, record.diff))
            np.testing.assert_array_equal(record.mask, change_mask(record.anchor, aligned))


if __name__ == "__main__":
    unittest.main()
