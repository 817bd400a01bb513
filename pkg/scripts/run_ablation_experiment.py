"""
Unseen-part ablation: train concat and gca on the constrained ablation sets,
once on aligned pairs and once on perturbed pairs, then evaluate all four
models on the aligned and the perturbed seen-pose test splits. The test splits
have no part constraints, so their unseen_parts stratum holds the pairs whose
change touches front_bracket, pulley or wheel_4.

Exit code 0 when every hard gate holds, 1 otherwise. The directional
expectations are printed but do not gate.
"""
import argparse
import logging
import os
import sys
from pathlib import Path

# Add app to path
sys.path.append(os.getcwd())

from app.models import Scale
from app.services.assembly import load_catalog
from app.services.dataset import ABLATION_UNSEEN_PARTS, Manifest, build_standard_suites
from app.services.evaluation import METRICS, StrataConfig, evaluate
from app.services.model import ArchConfig, build_model
from app.services.report_generator import emit_report
from app.services.train_config_manager import TrainConfigManager
from app.services.training import train

logger = logging.getLogger("app")

# (name, preset, training split, validation split)
RUNS = (
    ("concat_aligned", "concat", "ablation_train_aligned", "test_seen_pose_aligned"),
    ("gca_aligned", "gca", "ablation_train_aligned", "test_seen_pose_aligned"),
    ("concat_perturbed", "concat", "ablation_train", "test_seen_pose"),
    ("gca_perturbed", "gca", "ablation_train", "test_seen_pose"),
)
TEST_SPLITS = ("test_seen_pose_aligned", "test_seen_pose")
REQUIRED = ("ablation_train", "ablation_train_aligned") + TEST_SPLITS


def ensure_suites(data: Path, seed: int, jobs: int):
    if all((data / s).is_dir() for s in REQUIRED):
        logger.info(f"Reusing suites in {data}")
        return
    build_standard_suites(data, Scale.TINY, seed=seed, jobs=jobs)


def median(report, stratum, metric="iou"):
    try:
        return report.aggregate(stratum, metric).median
    except KeyError:
        return None


def _fmt(value) -> str:
    return "n/a" if value is None else f"{value:.3f}"


def run(data: Path, out: Path, seed: int, epochs: int, jobs: int) -> int:
    ensure_suites(data, seed, jobs)
    strata = StrataConfig.with_unseen_parts(load_catalog(), ABLATION_UNSEEN_PARTS)
    tests = {name: Manifest.load(data / name) for name in TEST_SPLITS}

    reports = {}
    for name, preset, train_split, val_split in RUNS:
        settings = TrainConfigManager.preset(preset)
        settings["epochs"] = epochs
        settings["warmup_epochs"] = min(settings["warmup_epochs"], epochs - 1)
        mechanism, cfg = TrainConfigManager.to_train_config(settings, seed=seed)
        model = build_model(ArchConfig.for_mechanism(mechanism), seed)
        result = train(model, Manifest.load(data / train_split), Manifest.load(data / val_split), cfg,
                       out / "runs" / name)
        logger.info(f"{name}: {result.steps} steps on {train_split}, best score {result.best_score}")
        for split, manifest in tests.items():
            report = evaluate(model, manifest, strata=strata)
            report.label = name
            emit_report(report, out / "reports" / f"{name}_{split}")
            reports[(name, split)] = report

    print(f"{'Model':<17} | {'Test split':<23} | {'All':<6} | {'Unseen':<6} | {'Seen':<6} | "
          f"{'Anchor':<6} | {'Sample':<6}")
    print("-" * 88)
    for (name, split), report in reports.items():
        cells = [median(report, "all"), median(report, "unseen_parts"), median(report, "seen_parts"),
                 median(report, "all", "iou_anchor_origin"), median(report, "all", "iou_sample_origin")]
        text = [_fmt(c) for c in cells]
        print(f"{name:<17} | {split:<23} | {text[0]:<6} | {text[1]:<6} | {text[2]:<6} | {text[3]:<6} | {text[4]:<6}")

    gates = {
        "reports well-formed": all(_well_formed(r) for r in reports.values()),
        "unseen_parts stratum populated": all(r.aggregate("unseen_parts").count > 0 for r in reports.values()),
    }
    aligned, perturbed = TEST_SPLITS
    expectations = {
        "concat_aligned >= gca_aligned on unseen parts (aligned test)":
            _at_least(median(reports[("concat_aligned", aligned)], "unseen_parts"),
                      median(reports[("gca_aligned", aligned)], "unseen_parts")),
        "concat_aligned >= gca_perturbed on unseen parts (aligned test)":
            _at_least(median(reports[("concat_aligned", aligned)], "unseen_parts"),
                      median(reports[("gca_perturbed", aligned)], "unseen_parts")),
        "gca_perturbed >= concat_perturbed (perturbed test)":
            _at_least(median(reports[("gca_perturbed", perturbed)], "all"),
                      median(reports[("concat_perturbed", perturbed)], "all")),
        "gca_perturbed anchor-origin >= sample-origin":
            _at_least(median(reports[("gca_perturbed", perturbed)], "all", "iou_anchor_origin"),
                      median(reports[("gca_perturbed", perturbed)], "all", "iou_sample_origin")),
    }

    print()
    for name, ok in gates.items():
        print(f"[gate] {name:<62} {'ok' if ok else 'FAIL'}")
    for name, ok in expectations.items():
        print(f"[info] {name:<62} {'yes' if ok else 'no'}")
    return 0 if all(gates.values()) else 1


def _at_least(a, b) -> bool:
    return a is not None and b is not None and a >= b


def _well_formed(report) -> bool:
    for row in report.rows:
        for metric in METRICS:
            value = getattr(row, metric)
            if value is not None and not 0.0 <= value <= 1.0:
                return False
    return len(report.rows) > 0


def main() -> int:
    parser = argparse.ArgumentParser(description="Unseen-part ablation: aligned vs. perturbed, concat vs. gca")
    parser.add_argument("--data", default="data")
    parser.add_argument("--out", default="experiments/ablation")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--epochs", type=int, default=60)
    parser.add_argument("--jobs", type=int, default=None)
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    return run(Path(args.data), Path(args.out), args.seed, args.epochs, args.jobs)


if __name__ == "__main__":
    sys.exit(main())
