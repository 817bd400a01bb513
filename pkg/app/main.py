import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
from pydantic import ValidationError as ConfigError

from .config import RunConfig, env_values, resolve_run_config
from .models import InvalidArgumentError, Mechanism, StateDiffError
from .services import oracles
from .services.checkpoint import load_checkpoint
from .services.dataset import Manifest, build_standard_suites, load_pair
from .services.assembly import load_catalog
from .services.evaluation import StrataConfig, evaluate, prepare_for_eval
from .services.model import ArchConfig, build_model, extract_attention
from .services.report_generator import ReportGenerator, emit_report
from .services.train_config_manager import TrainConfigManager
from .services.training import train
from .version import __version__

logger = logging.getLogger("app")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


def _add_common(parser: argparse.ArgumentParser, seeded: bool = True):
    # every flag defaults to None so file and environment values show through
    parser.add_argument("--config", help="JSON run config; flags and SDN_* variables override it")
    parser.add_argument("--catalog", help="part catalog JSON (default: bundled 16-part vehicle)")
    parser.add_argument("--data", help="dataset root (default: data)")
    parser.add_argument("--out", help="output directory")
    if seeded:
        parser.add_argument("--seed", type=int, help="master seed, unsigned 64-bit")
    parser.add_argument("--jobs", type=int, help="worker processes")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="statediff", description="StateDiff Lab: assembly-state change detection")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="render the standard dataset suites")
    _add_common(gen)
    gen.add_argument("--scale", choices=["tiny", "small"])
    gen.add_argument("--split", help="generate only this split")
    gen.add_argument("--max-nqd", dest="max_nqd", type=float)
    gen.add_argument("--diff-min", dest="diff_min", type=int)
    gen.add_argument("--diff-max", dest="diff_max", type=int)

    tr = sub.add_parser("train", help="train a StateDiffNet")
    _add_common(tr)
    tr.add_argument("--mechanism", choices=["gca", "lca", "gca_msa", "concat"])
    tr.add_argument("--preset", help="named training preset")
    tr.add_argument("--split", help="training split (default: train)")
    tr.add_argument("--val-split", dest="val_split", help="validation split (default: test_seen_pose)")
    tr.add_argument("--windows", help="LCA windows at 16x16,8x8,4x4, e.g. 7,5,3")
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--max-steps", dest="max_steps", type=int)

    ev = sub.add_parser("eval", help="evaluate a checkpoint and emit the report")
    _add_common(ev, seeded=False)
    ev.add_argument("--mechanism", choices=["gca", "lca", "gca_msa", "concat"])
    ev.add_argument("--checkpoint")
    ev.add_argument("--baseline", help="checkpoint to compare against")
    ev.add_argument("--split", help="split to evaluate (default: test_seen_pose)")
    ev.add_argument("--unseen-parts", dest="unseen_parts",
                    help="comma-separated part names reported as the unseen_parts stratum")

    at = sub.add_parser("attn", help="attention heatmap of one query pixel")
    _add_common(at, seeded=False)
    at.add_argument("--mechanism", choices=["gca", "lca", "gca_msa", "concat"])
    at.add_argument("--checkpoint")
    at.add_argument("--split", help="split holding the pair (default: test_seen_pose)")
    at.add_argument("--pair", type=int, help="pair id (default: 0)")
    at.add_argument("--query", help="X,Y pixel in the model input")
    at.add_argument("--level", type=int, choices=[0, 1, 2], help="attention level, 0 = finest")

    gc = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    gc.add_argument("--seed", type=int)

    orc = sub.add_parser("oracle", help="run the brute-force oracle suites")
    orc.add_argument("--suite", dest="suites", action="append", choices=sorted(oracles.SUITES))
    return parser


def _default_checkpoint(cfg: RunConfig) -> str:
    mechanism = Mechanism.parse(cfg.mechanism or "gca")
    return str(Path("runs") / mechanism.value / "best.ckpt")


# --- Commands ---

def cmd_gen(cfg: RunConfig) -> int:
    root = cfg.out or cfg.data
    manifests = build_standard_suites(root, scale=cfg.scale, seed=cfg.seed, catalog=cfg.catalog, jobs=cfg.jobs,
                                      overrides=cfg.gen_overrides(), only=cfg.split)
    for name, manifest in manifests.items():
        print(f"{name:<26} {len(manifest):>6} pairs  {manifest.path}")
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    settings = TrainConfigManager.preset(cfg.preset) if cfg.preset else TrainConfigManager.get_config()
    settings.update(cfg.train)
    if cfg.mechanism is not None:
        settings["mechanism"] = cfg.mechanism
    if cfg.epochs is not None:
        settings["epochs"] = cfg.epochs
        settings["warmup_epochs"] = min(settings["warmup_epochs"], cfg.epochs - 1)
    if cfg.max_steps is not None:
        settings["max_steps"] = cfg.max_steps
    mechanism, train_cfg = TrainConfigManager.to_train_config(settings, seed=cfg.seed)

    train_manifest = Manifest.load(Path(cfg.data) / (cfg.split or "train"))
    val_manifest = None
    if cfg.val_split:
        val_path = Path(cfg.data) / cfg.val_split
        if val_path.is_dir():
            val_manifest = Manifest.load(val_path)
        else:
            logger.warning(f"Validation split {val_path} not found, selecting checkpoints on training loss")

    attention = {"windows": cfg.windows} if cfg.windows else {}
    arch = ArchConfig.for_mechanism(mechanism, attention=attention)
    model = build_model(arch, cfg.seed)
    out_dir = Path(cfg.out or Path("runs") / mechanism.value)
    logger.info(f"Training {mechanism.value} ({model.parameter_count()} parameters) into {out_dir}")
    result = train(model, train_manifest, val_manifest, train_cfg, out_dir)
    print(f"steps {result.steps}  best {result.best_score}  checkpoint {result.best_path}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig) -> int:
    if cfg.checkpoint is None:
        cfg.checkpoint = _default_checkpoint(cfg)
    model, _ = load_checkpoint(cfg.require_file("checkpoint"))
    split = cfg.split or "test_seen_pose"
    manifest = Manifest.load(Path(cfg.data) / split)
    strata = None
    if cfg.unseen_parts:
        strata = StrataConfig.with_unseen_parts(load_catalog(cfg.catalog), cfg.unseen_parts)
    report = evaluate(model, manifest, strata=strata)

    baseline = None
    if cfg.baseline is not None:
        base_model, _ = load_checkpoint(cfg.require_file("baseline"))
        baseline = evaluate(base_model, manifest, strata=strata, panels=0)

    out_dir = Path(cfg.out or Path("reports") / f"{model.mechanism.value}_{split}")
    emit_report(report, out_dir, baseline=baseline)
    overall = report.aggregate("all", "iou") if report.aggregates else None
    median = "n/a" if overall is None or overall.median is None else f"{overall.median:.4f}"
    print(f"{split}: {len(report.rows)} pairs, median IoU {median}, report in {out_dir}")
    return EXIT_OK


def cmd_attn(cfg: RunConfig) -> int:
    if cfg.checkpoint is None:
        cfg.checkpoint = _default_checkpoint(cfg)
    if cfg.query is None:
        raise InvalidArgumentError("--query X,Y is required for 'attn'")
    model, _ = load_checkpoint(cfg.require_file("checkpoint"))
    manifest = Manifest.load(Path(cfg.data) / (cfg.split or "test_seen_pose"))
    record = prepare_for_eval(load_pair(manifest, cfg.pair), model.arch.input_size)
    query = (cfg.query[0], cfg.query[1])
    attn = extract_attention(model, record.anchor.rgb, record.sample.rgb, cfg.level, query)

    out_dir = Path(cfg.out or "reports")
    name = f"attention_pair{cfg.pair:08d}_l{cfg.level}_{query[0]}_{query[1]}.png"
    path = ReportGenerator(out_dir).write_attention_overlay(record.anchor.rgb, record.sample.rgb, attn, query, name)
    np.save(path.with_suffix(".npy"), attn.weights)
    print(f"level {cfg.level} ({attn.resolution}x{attn.resolution}), cell {attn.query_cell}: {path}")
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig) -> int:
    reports = oracles.gradcheck_all(seed=cfg.seed)
    print(f"{'Op':<26} | {'Max rel. error':<14} | Result")
    print("-" * 52)
    for r in reports:
        print(f"{r.name:<26} | {r.max_rel_error:<14.3e} | {'ok' if r.passed else 'FAIL'}")
    failed = [r.name for r in reports if not r.passed]
    if failed:
        logger.error(f"gradient check failed for {', '.join(failed)}")
        return EXIT_FAILURE
    return EXIT_OK


def cmd_oracle(cfg: RunConfig) -> int:
    results = oracles.run_oracles(cfg.suites)
    print(f"{'Suite':<28} | {'Result':<6} | {'Time':>8} | Detail")
    print("-" * 90)
    for r in results:
        print(f"{r.name:<28} | {'pass' if r.passed else 'FAIL':<6} | {r.seconds:>7.2f}s | {r.detail}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        logger.error(f"oracle suites failed: {', '.join(failed)}")
        return EXIT_FAILURE
    return EXIT_OK


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "attn": cmd_attn,
    "gradcheck": cmd_gradcheck,
    "oracle": cmd_oracle,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE

    flags = vars(args)
    command = flags.pop("command")
    config_path = flags.pop("config", None)
    level = (flags.get("log_level") or env_values().get("log_level") or "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    try:
        cfg = resolve_run_config(command, flags, config_path)
        return COMMANDS[command](cfg)
    except (InvalidArgumentError, ConfigError) as e:
        logger.error(f"{command}: {str(e).splitlines()[0]}")
        return EXIT_USAGE
    except (StateDiffError, FileNotFoundError, OSError, KeyError) as e:
        logger.error(f"{command}: {e}")
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
