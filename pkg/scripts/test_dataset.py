import json
import os
import sys
import tempfile
import unittest
from pathlib import Path
from unittest import mock

import numpy as np

# Add app to path
sys.path.append(os.getcwd())

from app.models import ChecksumError, Scale, Split
from app.services import dataset
from app.services.assembly import load_catalog, part_diff
from app.services.dataset import (
    MANIFEST_NAME, PAIR_FILES, GenConfig, Manifest, build_standard_suites, check_record, generate_dataset,
    generate_pair, iter_pairs, load_pair, suite_configs,
)
from app.services.geometry import nqd


class TestGeneratePair(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.catalog = load_catalog()
        cls.config = GenConfig(name="train", split=Split.TRAIN, count=8, seed=11, max_nqd=0.4, d_min=2, d_max=4)

    def test_same_id_same_record(self):
        a = generate_pair(self.config, self.catalog, 3)
        b = generate_pair(self.config, self.catalog, 3)
        np.testing.assert_array_equal(a.anchor.rgb, b.anchor.rgb)
        np.testing.assert_array_equal(a.sample.rgb, b.sample.rgb)
        np.testing.assert_array_equal(a.mask, b.mask)
        self.assertEqual(a.nqd_value, b.nqd_value)

    def test_record_invariants(self):
        for pair_id in range(8):
            record = generate_pair(self.config, self.catalog, pair_id)
            self.assertEqual(check_record(record), [])
            self.assertLessEqual(record.nqd_value, 0.4)
            self.assertTrue(2 <= record.diff.count <= 4)
            self.assertEqual(record.diff, part_diff(record.anchor.state, record.sample.state))
            self.assertTrue(record.anchor.instance.any())

    def test_aligned_variant_shares_states_and_anchor_pose(self):
        aligned_cfg = self.config.model_copy(update={"name": "train_aligned", "max_nqd": 0.0, "stream": "train"})
        for pair_id in range(4):
            base = generate_pair(self.config, self.catalog, pair_id)
            aligned = generate_pair(aligned_cfg, self.catalog, pair_id)
            self.assertEqual(base.anchor.state, aligned.anchor.state)
            self.assertEqual(base.sample.state, aligned.sample.state)
            self.assertTrue(base.anchor.pose.same_pose(aligned.anchor.pose))
            self.assertTrue(aligned.anchor.pose.same_pose(aligned.sample.pose))
            self.assertEqual(aligned.nqd_value, 0.0)

    def test_stream_defaults_to_name(self):
        other = self.config.model_copy(update={"name": "other"})
        self.assertNotEqual(self.config.stream_id(), other.stream_id())
        self.assertEqual(self.config.model_copy(update={"name": "x", "stream": "train"}).stream_id(),
                         self.config.stream_id())

    def test_config_bounds(self):
        with self.assertRaises(ValueError):
            GenConfig(name="bad", split=Split.TRAIN, count=1, d_min=5, d_max=2)
        with self.assertRaises(ValueError):
            GenConfig(name="bad", split=Split.TRAIN, count=1, max_nqd=2.0)
        with self.assertRaises(ValueError):
            GenConfig(name="bad", split=Split.TRAIN, count=0)


class TestPersistence(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)
        self.config = GenConfig(name="train", split=Split.TRAIN, count=4, seed=5)

    def tearDown(self):
        self.tmp.cleanup()

    def test_layout_and_reload(self):
        manifest = generate_dataset(self.config, self.root, jobs=1)
        self.assertEqual(len(manifest), 4)
        self.assertEqual(manifest.pair_ids(), [0, 1, 2, 3])
        self.assertTrue((self.root / "train" / MANIFEST_NAME).exists())
        for name in PAIR_FILES:
            self.assertTrue((self.root / "train" / "00000002" / name).exists())

        loaded = Manifest.load(self.root / "train")
        self.assertEqual(loaded.records, manifest.records)
        self.assertEqual(loaded.split, Split.TRAIN)

        catalog = load_catalog()
        fresh = generate_pair(self.config, catalog, 2)
        record = load_pair(loaded, 2)
        np.testing.assert_array_equal(record.anchor.rgb, fresh.anchor.rgb)
        np.testing.assert_array_equal(record.sample.instance, fresh.sample.instance)
        np.testing.assert_array_equal(record.mask, fresh.mask)
        self.assertEqual(record.nqd_value, fresh.nqd_value)
        self.assertEqual(record.diff, fresh.diff)
        self.assertIsNone(record.anchor.depth)
        self.assertEqual(check_record(record), [])

    def test_manifest_lines_are_sorted_json(self):
        manifest = generate_dataset(self.config, self.root, jobs=1)
        lines = manifest.path.read_text().splitlines()
        self.assertEqual(len(lines), 4)
        first = json.loads(lines[0])
        self.assertEqual(lines[0], json.dumps(first, sort_keys=True))
        for key in ("pair_id", "state_a", "state_b", "pose_a", "pose_b", "nqd", "only_in_a", "only_in_b",
                    "split", "catalog_key", "diff_count", "files"):
            self.assertIn(key, first)

    def test_independent_of_jobs(self):
        serial = generate_dataset(self.config, self.root / "a", jobs=1)
        parallel = generate_dataset(self.config, self.root / "b", jobs=2)
        self.assertEqual(serial.path.read_bytes(), parallel.path.read_bytes())
        for pair_dir in ("00000000", "00000003"):
            self.assertEqual((serial.root / pair_dir / "mask.png").read_bytes(),
                             (parallel.root / pair_dir / "mask.png").read_bytes())

    def test_corrupted_file(self):
        manifest = generate_dataset(self.config, self.root, jobs=1)
        (manifest.root / "00000001" / "mask.png").write_bytes(b"not a png")
        with self.assertRaises(ChecksumError):
            load_pair(manifest, 1)
        load_pair(manifest, 0)

    def test_missing_file(self):
        manifest = generate_dataset(self.config, self.root, jobs=1)
        (manifest.root / "00000001" / "sample.png").unlink()
        with self.assertRaises(FileNotFoundError):
            load_pair(manifest, 1)

    def test_missing_manifest(self):
        with self.assertRaises(FileNotFoundError):
            Manifest.load(self.root / "nothing")

    def test_exclusion_between_splits(self):
        train = generate_dataset(self.config, self.root, jobs=1)
        test_cfg = GenConfig(name="test_seen_pose", split=Split.TEST_SEEN_POSE, count=6, seed=5)
        test = generate_dataset(test_cfg, self.root, jobs=1, exclude=train.pair_keys())
        self.assertFalse(train.pair_keys() & test.pair_keys())
        self.assertEqual(len(list(iter_pairs(test))), 6)


class TestSuites(unittest.TestCase):
    def test_standard_configs(self):
        configs = {c.name: c for c in suite_configs(Scale.TINY, seed=7)}
        self.assertEqual(set(configs), {"train", "test_seen_pose", "test_novel_pose", "ablation_train",
                                        "train_aligned", "test_seen_pose_aligned", "ablation_train_aligned"})
        self.assertEqual(configs["train"].count, 512)
        self.assertEqual(configs["test_seen_pose"].count, 128)
        self.assertEqual((configs["train"].d_min, configs["train"].d_max, configs["train"].max_nqd), (1, 6, 0.1))
        self.assertEqual((configs["test_seen_pose"].d_max, configs["test_seen_pose"].max_nqd), (10, 0.4))
        self.assertEqual(configs["train_aligned"].stream_id(), configs["train"].stream_id())
        self.assertEqual(configs["test_seen_pose_aligned"].max_nqd, 0.0)
        self.assertEqual(configs["ablation_train"].constraints.never_present, ["pulley", "wheel_4"])

    def test_aligned_ablation_config(self):
        configs = {c.name: c for c in suite_configs(Scale.TINY, seed=7)}
        aligned = configs["ablation_train_aligned"]
        self.assertEqual(aligned.max_nqd, 0.0)
        self.assertEqual(aligned.stream_id(), configs["ablation_train"].stream_id())
        self.assertEqual(aligned.constraints, configs["ablation_train"].constraints)
        self.assertEqual(aligned.count, configs["train"].count)

    def test_aligned_ablation_pairs_share_states(self):
        configs = {c.name: c for c in suite_configs(Scale.TINY, seed=7)}
        catalog = load_catalog()
        unseen = catalog.ids_of(dataset.ABLATION_UNSEEN_PARTS)
        for pair_id in range(4):
            perturbed = generate_pair(configs["ablation_train"], catalog, pair_id)
            aligned = generate_pair(configs["ablation_train_aligned"], catalog, pair_id)
            self.assertEqual(aligned.diff, perturbed.diff)
            self.assertEqual(aligned.nqd_value, 0.0)
            self.assertFalse(aligned.diff.all_parts() & unseen)

    def test_overrides(self):
        configs = {c.name: c for c in suite_configs(Scale.TINY, overrides={"max_nqd": 0.2, "d_max": 3})}
        self.assertEqual(configs["train"].max_nqd, 0.2)
        self.assertEqual(configs["test_novel_pose"].d_max, 3)
        self.assertEqual(configs["train_aligned"].max_nqd, 0.0)
        self.assertEqual(configs["train_aligned"].d_max, 3)

    def test_build_small_suites(self):
        with tempfile.TemporaryDirectory() as tmp, \
                mock.patch.dict(dataset.SUITE_COUNTS, {Scale.TINY: (4, 3)}):
            manifests = build_standard_suites(tmp, Scale.TINY, seed=2, jobs=1)
            self.assertEqual(len(manifests["train"]), 4)
            self.assertEqual(len(manifests["test_novel_pose"]), 3)
            train_keys = manifests["train"].pair_keys()
            self.assertFalse(train_keys & manifests["test_seen_pose"].pair_keys())
            self.assertFalse(train_keys & manifests["test_seen_pose_aligned"].pair_keys())

            again = build_standard_suites(tmp, Scale.TINY, seed=2, jobs=1, only="test_seen_pose")
            self.assertEqual(again["test_seen_pose"].records, manifests["test_seen_pose"].records)

    def test_seen_pose_alone_warns_without_train(self):
        with tempfile.TemporaryDirectory() as tmp, \
                mock.patch.dict(dataset.SUITE_COUNTS, {Scale.TINY: (4, 3)}):
            with self.assertLogs("app.services.dataset", level="WARNING") as logs:
                manifests = build_standard_suites(tmp, Scale.TINY, seed=2, jobs=1, only="test_seen_pose")
            self.assertEqual(len(manifests["test_seen_pose"]), 3)
            self.assertTrue(any("without excluding" in line for line in logs.output))


if __name__ == "__main__":
    unittest.main()
