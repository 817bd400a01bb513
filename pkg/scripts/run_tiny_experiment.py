"""
Tiny end-to-end experiment: generate the tiny suites, train the gca, lca and
concat variants, evaluate them on both test splits and the aligned test set,
and write one report per (variant, split) under --out.

Exit code 0 when every hard gate holds, 1 otherwise. The directional
expectations are printed but do not gate.
"""
import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

# Add app to path
sys.path.append(os.getcwd())

from app.models import Scale
from app.services.dataset import Manifest, build_standard_suites
from app.services.evaluation import METRICS, evaluate
from app.services.model import ArchConfig, build_model
from app.services.report_generator import emit_report
from app.services.train_config_manager import TrainConfigManager
from app.services.training import train

logger = logging.getLogger("app")

VARIANTS = ("gca", "lca", "concat")
TEST_SPLITS = ("test_seen_pose", "test_novel_pose", "test_seen_pose_aligned")
ZERO_MARGIN = 0.2


def zero_predictor(records):
    return [np.zeros_like(r.mask) for r in records]


def ensure_suites(data: Path, seed: int, jobs: int):
    if (data / "train").is_dir() and all((data / s).is_dir() for s in TEST_SPLITS):
        logger.info(f"Reusing suites in {data}")
        return
    build_standard_suites(data, Scale.TINY, seed=seed, jobs=jobs)


def median(report, stratum="all", metric="iou"):
    return report.aggregate(stratum, metric).median if report.aggregates else None


def well_formed(report) -> bool:
    for row in report.rows:
        for metric in METRICS:
            value = getattr(row, metric)
            if value is not None and not 0.0 <= value <= 1.0:
                return False
    return len(report.rows) > 0


def run(data: Path, out: Path, seed: int, epochs: int, jobs: int) -> int:
    ensure_suites(data, seed, jobs)
    train_manifest = Manifest.load(data / "train")
    val_manifest = Manifest.load(data / "test_seen_pose")
    tests = {name: Manifest.load(data / name) for name in TEST_SPLITS}

    reports = {}
    for variant in VARIANTS:
        settings = TrainConfigManager.preset(variant)
        settings["epochs"] = epochs
        settings["warmup_epochs"] = min(settings["warmup_epochs"], epochs - 1)
        mechanism, cfg = TrainConfigManager.to_train_config(settings, seed=seed)
        model = build_model(ArchConfig.for_mechanism(mechanism), seed)
        result = train(model, train_manifest, val_manifest, cfg, out / "runs" / variant)
        logger.info(f"{variant}: {result.steps} steps, best score {result.best_score}")
        for split, manifest in tests.items():
            report = evaluate(model, manifest)
            emit_report(report, out / "reports" / f"{variant}_{split}")
            reports[(variant, split)] = report

    zero = evaluate(None, tests["test_seen_pose"], predictor=zero_predictor, panels=0)
    zero.label = "all-zero"
    emit_report(zero, out / "reports" / "zero_test_seen_pose", pdf=False)

    print(f"{'Variant':<8} | {'Split':<24} | {'Median IoU':<10} | {'Anchor-origin':<13} | {'Sample-origin':<13}")
    print("-" * 80)
    for (variant, split), report in reports.items():
        cells = [median(report, metric=m) for m in METRICS]
        text = ["n/a" if c is None else f"{c:.3f}" for c in cells]
        print(f"{variant:<8} | {split:<24} | {text[0]:<10} | {text[1]:<13} | {text[2]:<13}")
    zero_median = median(zero)
    print(f"{'zero':<8} | {'test_seen_pose':<24} | {zero_median:<10.3f} |")

    gates = {
        "reports well-formed": all(well_formed(r) for r in reports.values()),
        f"gca beats all-zero by >= {ZERO_MARGIN}":
            median(reports[("gca", "test_seen_pose")]) >= zero_median + ZERO_MARGIN,
    }
    expectations = {
        "concat >= gca on aligned pairs":
            median(reports[("concat", "test_seen_pose_aligned")]) >= median(reports[("gca", "test_seen_pose_aligned")]),
        "gca novel pose < seen pose":
            median(reports[("gca", "test_novel_pose")]) < median(reports[("gca", "test_seen_pose")]),
        "gca anchor-origin >= sample-origin": _origin_order(reports[("gca", "test_seen_pose")]),
    }

    print()
    for name, ok in gates.items():
        print(f"[gate] {name:<44} {'ok' if ok else 'FAIL'}")
    for name, ok in expectations.items():
        print(f"[info] {name:<44} {'yes' if ok else 'no'}")
    return 0 if all(gates.values()) else 1


def _origin_order(report) -> bool:
    anchor = median(report, metric="iou_anchor_origin")
    sample = median(report, metric="iou_sample_origin")
    return anchor is not None and sample is not None and anchor >= sample


def main() -> int:
    parser = argparse.ArgumentParser(description="Tiny gca / lca / concat experiment")
    parser.add_argument("--data", default="data")
    parser.add_argument("--out", default="experiments/tiny")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--epochs", type=int, default=60)
    parser.add_argument("--jobs", type=int, default=None)
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    return run(Path(args.data), Path(args.out), args.seed, args.epochs, args.jobs)


if __name__ == "__main__":
    sys.exit(main())
