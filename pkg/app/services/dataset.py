import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Set, Tuple, Union

import numpy as np
from pydantic import BaseModel, field_validator, model_validator

from .. import utils
from ..models import BackgroundStyle, ChecksumError, InvalidArgumentError, PairRecord, Scale, Split
from .assembly import (
    AssemblyState, PartCatalog, PartDiff, StateConstraints, load_catalog, part_diff, sample_state_pair,
)
from .geometry import SQRT2, CameraPose, Intrinsics, NOVEL_POSE_RANGE, PoseRange, TRAIN_POSE_RANGE, nqd, perturb_pose, sample_pose
from .image_service import ImageService
from .rasterizer import RenderParams, RenderedView, change_mask, rasterize

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.jsonl"
CONFIG_NAME = "config.json"

PAIR_FILES = (
    "anchor.png",
    "sample.png",
    "anchor_instance.png",
    "sample_instance.png",
    "aligned_instance.png",
    "mask.png",
    "meta.json",
)

LIGHT_CONE_DEG = 30.0
AMBIENT_RANGE = (0.25, 0.45)
GRAY_RANGE = (96, 160)

SUITE_COUNTS = {
    Scale.TINY: (512, 128),
    Scale.SMALL: (8192, 1024),
}

# parts that never change in the ablation training sets
ABLATION_ALWAYS_PRESENT = ["front_bracket"]
ABLATION_NEVER_PRESENT = ["pulley", "wheel_4"]
ABLATION_UNSEEN_PARTS = ABLATION_ALWAYS_PRESENT + ABLATION_NEVER_PRESENT


class GenConfig(BaseModel):
    """One split of a dataset. Pose distances are given in object radii."""
    name: str
    split: Split
    count: int
    d_min: int = 1
    d_max: int = 6
    max_nqd: float = 0.1
    pose_range: PoseRange = TRAIN_POSE_RANGE
    position_jitter: float = 0.05    # fraction of camera distance; unused when max_nqd == 0
    constraints: StateConstraints = StateConstraints()
    render: RenderParams = RenderParams()
    randomize_lighting: bool = True
    fov_deg: float = 50.0
    seed: int = 0
    stream: Optional[str] = None     # random stream key; defaults to name, shared by aligned variants
    catalog: Optional[str] = None

    @field_validator("count")
    @classmethod
    def _positive_count(cls, value):
        if value < 1:
            raise ValueError(f"count must be >= 1, got {value}")
        return value

    @model_validator(mode="after")
    def _bounds(self):
        if not 0 <= self.d_min <= self.d_max:
            raise ValueError(f"need 0 <= d_min <= d_max, got [{self.d_min}, {self.d_max}]")
        if not 0.0 <= self.max_nqd <= SQRT2 + 1e-12:
            raise ValueError(f"max_nqd must lie in [0, sqrt(2)], got {self.max_nqd}")
        if self.position_jitter < 0.0:
            raise ValueError("position_jitter must be >= 0")
        return self

    def stream_id(self) -> int:
        key = self.stream or self.name
        return int(utils.calculate_file_hash(key.encode("utf-8"))[:8], 16)


@dataclass
class Manifest:
    """Records of one split, in pair_id order. root is the split directory."""
    root: Path
    name: str
    split: Split
    records: List[dict] = field(default_factory=list)

    @property
    def path(self) -> Path:
        return self.root / MANIFEST_NAME

    def __len__(self) -> int:
        return len(self.records)

    def pair_ids(self) -> List[int]:
        return [r["pair_id"] for r in self.records]

    def entry(self, pair_id: int) -> dict:
        for r in self.records:
            if r["pair_id"] == pair_id:
                return r
        raise KeyError(f"pair {pair_id} not in manifest {self.path}")

    def pair_keys(self) -> Set[Tuple[int, int]]:
        return {tuple(sorted((r["state_a"], r["state_b"]))) for r in self.records}

    def write(self):
        lines = [json.dumps(r, sort_keys=True) for r in self.records]
        self.path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Manifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        if not path.exists():
            raise FileNotFoundError(f"manifest not found: {path}")
        records = [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
        if records:
            split = Split(records[0]["split"])
        else:
            split = Split(json.loads((path.parent / CONFIG_NAME).read_text(encoding="utf-8"))["split"])
        return cls(root=path.parent, name=path.parent.name, split=split, records=records)


# --- Pair generation ---

def _view_params(base: RenderParams, rng: np.random.Generator, randomize: bool) -> RenderParams:
    """Light inside a cone around the configured direction, random ambient and background."""
    if not randomize:
        return base
    nominal = np.asarray(base.light_direction, dtype=np.float64)
    axis = rng.normal(size=3)
    axis -= (axis @ nominal) * nominal
    while np.linalg.norm(axis) < 1e-9:
        axis = rng.normal(size=3)
        axis -= (axis @ nominal) * nominal
    axis /= np.linalg.norm(axis)
    tilt = math.radians(rng.uniform(0.0, LIGHT_CONE_DEG))
    light = math.cos(tilt) * nominal + math.sin(tilt) * axis
    return base.model_copy(update={
        "light_direction": tuple(float(c) for c in light / np.linalg.norm(light)),
        "ambient": float(rng.uniform(*AMBIENT_RANGE)),
        "background": BackgroundStyle.NOISE if rng.random() < 0.5 else BackgroundStyle.FLAT,
        "background_seed": int(rng.integers(2 ** 31)),
        "background_gray": int(rng.integers(GRAY_RANGE[0], GRAY_RANGE[1] + 1)),
    })


def generate_pair(config: GenConfig, catalog: PartCatalog, pair_id: int,
                  exclude: Optional[Set[Tuple[int, int]]] = None) -> PairRecord:
    """
    Build one record in memory. Draw order on the pair stream: state pair,
    anchor pose, sample pose, anchor lighting, sample lighting.
    """
    rng = utils.pair_rng(config.seed, pair_id, config.stream_id())
    size = config.render.image_size
    intrinsics = Intrinsics.from_fov(size, config.fov_deg)
    pose_range = config.pose_range.scaled_distance(catalog.bounding_radius())

    # 1. States
    state_a, state_b = sample_state_pair(catalog, config.d_min, config.d_max, config.constraints, rng, exclude=exclude)

    # 2. Poses
    pose_a = sample_pose(pose_range, rng, intrinsics)
    jitter = config.position_jitter if config.max_nqd > 0.0 else 0.0
    pose_b = perturb_pose(pose_a, config.max_nqd, rng, position_jitter=jitter)

    # 3. Renders; the hidden alignment render shares the anchor's lighting
    params_a = _view_params(config.render, rng, config.randomize_lighting)
    params_b = _view_params(config.render, rng, config.randomize_lighting)
    anchor = rasterize(catalog, state_a, pose_a, params_a)
    sample = rasterize(catalog, state_b, pose_b, params_b)
    aligned = rasterize(catalog, state_b, pose_a, params_a)

    return PairRecord(
        anchor=anchor,
        sample=sample,
        mask=change_mask(anchor, aligned),
        aligned_instance=aligned.instance,
        nqd_value=nqd(pose_a.orientation, pose_b.orientation),
        diff=part_diff(state_a, state_b),
        pair_id=pair_id,
        split=config.split,
    )


def _meta(record: PairRecord) -> dict:
    return {
        "pair_id": record.pair_id,
        "state_a": record.anchor.state.to_bitmask(),
        "state_b": record.sample.state.to_bitmask(),
        "pose_a": record.anchor.pose.to_dict(),
        "pose_b": record.sample.pose.to_dict(),
        "nqd": record.nqd_value,
        "only_in_a": sorted(record.diff.only_in_a),
        "only_in_b": sorted(record.diff.only_in_b),
    }


def write_pair(record: PairRecord, split_dir: Path, catalog_key: str) -> dict:
    """Persist one record and return its manifest line."""
    pair_dir = split_dir / f"{record.pair_id:08d}"
    pair_dir.mkdir(parents=True, exist_ok=True)

    ImageService.save_rgb(record.anchor.rgb, pair_dir / "anchor.png")
    ImageService.save_rgb(record.sample.rgb, pair_dir / "sample.png")
    ImageService.save_instance(record.anchor.instance, pair_dir / "anchor_instance.png")
    ImageService.save_instance(record.sample.instance, pair_dir / "sample_instance.png")
    ImageService.save_instance(record.aligned_instance, pair_dir / "aligned_instance.png")
    ImageService.save_mask(record.mask, pair_dir / "mask.png")
    meta = _meta(record)
    (pair_dir / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True), encoding="utf-8")

    return {
        **meta,
        "split": record.split.value,
        "dir": pair_dir.name,
        "catalog_key": catalog_key,
        "diff_count": record.diff.count,
        "files": {name: utils.hash_path(pair_dir / name) for name in PAIR_FILES},
    }


def _generate_and_write(pair_id: int, config: GenConfig, catalog: PartCatalog, split_dir: Path,
                        exclude: Optional[Set[Tuple[int, int]]]) -> dict:
    record = generate_pair(config, catalog, pair_id, exclude)
    return write_pair(record, split_dir, catalog.key)


def default_jobs() -> int:
    return max(1, os.cpu_count() or 1)


def generate_dataset(config: GenConfig, out_root: Union[str, Path], jobs: Optional[int] = None,
                     exclude: Optional[Set[Tuple[int, int]]] = None,
                     catalog: Optional[PartCatalog] = None) -> Manifest:
    """
    Render config.count pairs into <out_root>/<config.name>/ and write the
    split manifest. Every pair draws from its own stream, so files and
    manifest do not depend on jobs.
    """
    catalog = catalog or load_catalog(config.catalog)
    split_dir = Path(out_root) / config.name
    split_dir.mkdir(parents=True, exist_ok=True)
    (split_dir / CONFIG_NAME).write_text(config.model_dump_json(indent=2), encoding="utf-8")

    jobs = jobs or default_jobs()
    logger.info(f"Generating {config.count} pairs for '{config.name}' ({config.split.value}) with {jobs} worker(s)")

    work = partial(_generate_and_write, config=config, catalog=catalog, split_dir=split_dir, exclude=exclude)
    pair_ids = range(config.count)
    if jobs == 1:
        records = [work(i) for i in pair_ids]
    else:
        chunk = max(1, config.count // (jobs * 4))
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(work, pair_ids, chunksize=chunk))

    records.sort(key=lambda r: r["pair_id"])
    manifest = Manifest(root=split_dir, name=config.name, split=config.split, records=records)
    manifest.write()
    logger.info(f"Wrote {manifest.path} ({len(records)} records)")
    return manifest


# --- Loading ---

def _verify(path: Path, expected: str):
    if not path.exists():
        raise FileNotFoundError(f"dataset file missing: {path}")
    actual = utils.hash_path(path)
    if actual != expected:
        raise ChecksumError(path, expected, actual)


def load_pair(manifest: Manifest, pair_id: int, verify: bool = True) -> PairRecord:
    """Rebuild a record from disk. Depth is not persisted and comes back as None."""
    entry = manifest.entry(pair_id)
    pair_dir = manifest.root / entry["dir"]
    if verify:
        for name, digest in entry["files"].items():
            _verify(pair_dir / name, digest)

    meta = json.loads((pair_dir / "meta.json").read_text(encoding="utf-8"))
    key = entry["catalog_key"]
    state_a = AssemblyState(utils.from_bitmask(meta["state_a"]), key)
    state_b = AssemblyState(utils.from_bitmask(meta["state_b"]), key)
    anchor = RenderedView(
        rgb=ImageService.load_rgb(pair_dir / "anchor.png"),
        instance=ImageService.load_instance(pair_dir / "anchor_instance.png"),
        pose=CameraPose.from_dict(meta["pose_a"]),
        state=state_a,
    )
    sample = RenderedView(
        rgb=ImageService.load_rgb(pair_dir / "sample.png"),
        instance=ImageService.load_instance(pair_dir / "sample_instance.png"),
        pose=CameraPose.from_dict(meta["pose_b"]),
        state=state_b,
    )
    return PairRecord(
        anchor=anchor,
        sample=sample,
        mask=ImageService.load_mask(pair_dir / "mask.png"),
        aligned_instance=ImageService.load_instance(pair_dir / "aligned_instance.png"),
        nqd_value=float(meta["nqd"]),
        diff=PartDiff(frozenset(meta["only_in_a"]), frozenset(meta["only_in_b"])),
        pair_id=int(meta["pair_id"]),
        split=manifest.split,
    )


def iter_pairs(manifest: Manifest, verify: bool = True) -> Iterator[PairRecord]:
    for pair_id in manifest.pair_ids():
        yield load_pair(manifest, pair_id, verify)


# --- Standard suites ---

def suite_configs(scale: Scale, seed: int = 0, catalog: Optional[str] = None,
                  overrides: Optional[dict] = None) -> List[GenConfig]:
    """
    Train, both test splits, the constrained ablation set and the aligned
    variants of train, ablation and the seen-pose test. overrides (d_min,
    d_max, max_nqd) apply to every split; aligned splits keep max_nqd at 0.
    """
    n_train, n_test = SUITE_COUNTS[Scale(scale)]
    common = dict(seed=seed, catalog=catalog)
    train = GenConfig(name="train", split=Split.TRAIN, count=n_train, d_min=1, d_max=6, max_nqd=0.1, **common)
    seen = GenConfig(name="test_seen_pose", split=Split.TEST_SEEN_POSE, count=n_test, d_min=1, d_max=10,
                     max_nqd=0.4, **common)
    novel = GenConfig(name="test_novel_pose", split=Split.TEST_NOVEL_POSE, count=n_test, d_min=1, d_max=10,
                      max_nqd=0.4, pose_range=NOVEL_POSE_RANGE, **common)
    ablation = train.model_copy(update={
        "name": "ablation_train",
        "constraints": StateConstraints(always_present=ABLATION_ALWAYS_PRESENT, never_present=ABLATION_NEVER_PRESENT),
    })
    train_aligned = train.model_copy(update={"name": "train_aligned", "max_nqd": 0.0, "stream": "train"})
    seen_aligned = seen.model_copy(update={"name": "test_seen_pose_aligned", "max_nqd": 0.0, "stream": "test_seen_pose"})
    ablation_aligned = ablation.model_copy(update={"name": "ablation_train_aligned", "max_nqd": 0.0,
                                                   "stream": "ablation_train"})
    configs = [train, seen, novel, ablation, train_aligned, seen_aligned, ablation_aligned]
    if not overrides:
        return configs
    out = []
    for cfg in configs:
        update = dict(overrides)
        if cfg.max_nqd == 0.0:
            update.pop("max_nqd", None)
        out.append(GenConfig.model_validate({**cfg.model_dump(), **update}))
    return out


def build_standard_suites(out_root: Union[str, Path], scale: Scale = Scale.TINY, seed: int = 0,
                          catalog: Optional[str] = None, jobs: Optional[int] = None,
                          overrides: Optional[dict] = None, only: Optional[str] = None) -> Dict[str, Manifest]:
    """
    Emit every standard split under out_root, or just the split named only.
    Seen-pose test splits exclude every state pair used for training; when
    train is not generated in this call its manifest is read from out_root.
    """
    cat = load_catalog(catalog)
    manifests: Dict[str, Manifest] = {}
    train_keys: Set[Tuple[int, int]] = set()
    configs = suite_configs(scale, seed, catalog, overrides)
    if only is not None:
        if only not in [c.name for c in configs]:
            raise InvalidArgumentError(f"unknown split '{only}', expected one of {[c.name for c in configs]}")
        train_manifest = Path(out_root) / "train" / MANIFEST_NAME
        configs = [c for c in configs if c.name == only]
        if only != "train" and train_manifest.exists():
            train_keys = Manifest.load(train_manifest).pair_keys()
        elif configs[0].split == Split.TEST_SEEN_POSE:
            logger.warning(f"No train manifest at {train_manifest}; '{only}' is generated without excluding "
                           f"training state pairs")
    for cfg in configs:
        exclude = train_keys if cfg.split == Split.TEST_SEEN_POSE else None
        manifests[cfg.name] = generate_dataset(cfg, out_root, jobs=jobs, exclude=exclude, catalog=cat)
        if cfg.name == "train":
            train_keys = manifests[cfg.name].pair_keys()
    logger.info(f"Suites written to {out_root}: {', '.join(manifests)}")
    return manifests


def check_record(record: PairRecord) -> List[str]:
    """Stored-mask and stored-nQD consistency problems of one record, empty if none."""
    problems = []
    recomputed = (record.anchor.instance != record.aligned_instance).astype(np.uint8)
    if not np.array_equal(recomputed, record.mask):
        problems.append(f"pair {record.pair_id}: mask differs from instance-map difference")
    value = nqd(record.anchor.pose.orientation, record.sample.pose.orientation)
    if abs(value - record.nqd_value) > 1e-9:
        problems.append(f"pair {record.pair_id}: stored nqd {record.nqd_value} != {value}")
    return problems
