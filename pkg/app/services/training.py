import json
import logging
import math
import queue
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, model_validator

from ..models import InvalidArgumentError, PairRecord, TrainingDivergedError
from .checkpoint import save_checkpoint
from .dataset import Manifest, iter_pairs
from .evaluation import evaluate_records, model_predictor
from .image_service import AugmentConfig, ImageService
from .kernels import Tensor, softmax_cross_entropy
from .model import StateDiffNet, stack_inputs

logger = logging.getLogger(__name__)

BEST_NAME = "best.ckpt"
LAST_NAME = "last.ckpt"
HISTORY_NAME = "history.json"


class TrainConfig(BaseModel):
    batch_size: int = 16
    epochs: int = 60
    warmup_epochs: int = 5
    lr: float = 3e-4
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    augment: AugmentConfig = AugmentConfig()
    crop_margin: float = 0.1
    translate: bool = True
    max_steps: Optional[int] = None
    prefetch: int = 2

    @model_validator(mode="after")
    def _schedule(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError(f"need 0 <= warmup_epochs < epochs, got {self.warmup_epochs} / {self.epochs}")
        if self.lr < 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        return self


def learning_rate(position: float, cfg: TrainConfig) -> float:
    """
    Linear warmup to cfg.lr over warmup_epochs, then cosine decay to zero at
    cfg.epochs. position is measured in (fractional) epochs.
    """
    if cfg.warmup_epochs > 0 and position < cfg.warmup_epochs:
        return cfg.lr * position / cfg.warmup_epochs
    span = cfg.epochs - cfg.warmup_epochs
    progress = min(max((position - cfg.warmup_epochs) / span, 0.0), 1.0)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


class Adam:
    """Adaptive-moment update with bias correction."""

    def __init__(self, params: Sequence[Tensor], betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self, lr: float):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.data.dtype, copy=False)


@dataclass
class Batch:
    anchors: np.ndarray     # (N, 3, S, S)
    samples: np.ndarray
    masks: np.ndarray       # (N, S, S) int64
    pair_ids: List[int]
    rng_state: Optional[dict] = None    # producer generator state right after this batch


def prepare_batch(records: Sequence[PairRecord], cfg: TrainConfig, input_size: int,
                  rng: np.random.Generator, dtype=np.float32) -> Batch:
    crops = []
    for rec in records:
        c = ImageService.roi_crop(rec, cfg.crop_margin, rng, input_size, translate=cfg.translate)
        crops.append(ImageService.augment_pair(c, cfg.augment, rng))
    return Batch(
        anchors=stack_inputs([c.anchor.rgb for c in crops], dtype),
        samples=stack_inputs([c.sample.rgb for c in crops], dtype),
        masks=np.stack([c.mask for c in crops]).astype(np.int64),
        pair_ids=[c.pair_id for c in crops],
    )


class BatchProducer(threading.Thread):
    """Prepares batches ahead of the training step; one stream per epoch."""

    def __init__(self, records: Sequence[PairRecord], cfg: TrainConfig, input_size: int, dtype):
        super().__init__(daemon=True)
        self.records = list(records)
        self.cfg = cfg
        self.input_size = input_size
        self.dtype = dtype
        self.queue: "queue.Queue" = queue.Queue(maxsize=max(1, cfg.prefetch))
        self._stop_event = threading.Event()

    def _put(self, item) -> bool:
        while not self._stop_event.is_set():
            try:
                self.queue.put(item, timeout=0.1)
                return True
            except queue.Full:
                continue
        return False

    def run(self):
        try:
            n = len(self.records)
            for epoch in range(self.cfg.epochs):
                rng = np.random.default_rng([self.cfg.seed, epoch])
                order = rng.permutation(n)
                for start in range(0, n, self.cfg.batch_size):
                    chunk = [self.records[i] for i in order[start:start + self.cfg.batch_size]]
                    batch = prepare_batch(chunk, self.cfg, self.input_size, rng, self.dtype)
                    batch.rng_state = rng.bit_generator.state
                    if not self._put(batch):
                        return
        except Exception as e:  # surfaced on the consumer side
            self._put(e)

    def next_batch(self) -> Batch:
        item = self.queue.get()
        if isinstance(item, Exception):
            raise item
        return item

    def stop(self):
        self._stop_event.set()


@dataclass
class TrainResult:
    history: List[dict] = field(default_factory=list)
    steps: int = 0
    best_score: Optional[float] = None
    best_path: Optional[Path] = None
    last_path: Optional[Path] = None


def _val_iou(model: StateDiffNet, records: Sequence[PairRecord]) -> Optional[float]:
    if not records:
        return None
    report = evaluate_records(records, model_predictor(model), input_size=model.arch.input_size, panels=0)
    return report.aggregate("all", "iou").median


def train_records(model: StateDiffNet, records: Sequence[PairRecord], cfg: TrainConfig,
                  val_records: Sequence[PairRecord] = (), out_dir: Optional[Union[str, Path]] = None) -> TrainResult:
    """
    Cross-entropy training of model on in-memory records. Writes best/last
    checkpoints and history.json when out_dir is given.
    """
    if not records:
        raise InvalidArgumentError("no training records")
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    optimizer = Adam(model.parameters(), cfg.betas, cfg.eps)
    steps_per_epoch = math.ceil(len(records) / cfg.batch_size)
    producer = BatchProducer(records, cfg, model.arch.input_size, model.dtype)
    producer.start()
    result = TrainResult()
    train_cfg = cfg.model_dump(mode="json")
    rng_state = None

    try:
        for epoch in range(cfg.epochs):
            losses = []
            lr = learning_rate(epoch, cfg)
            stopped = False
            for i in range(steps_per_epoch):
                batch = producer.next_batch()
                rng_state = batch.rng_state
                lr = learning_rate(epoch + (i + 1) / steps_per_epoch, cfg)

                logits = model.forward(batch.anchors, batch.samples)
                loss = softmax_cross_entropy(logits, batch.masks)
                value = float(loss.data)
                if not math.isfinite(value):
                    raise TrainingDivergedError(epoch + 1, result.steps, value)

                optimizer.zero_grad()
                loss.backward()
                optimizer.step(lr)
                losses.append(value)
                result.steps += 1
                if cfg.max_steps is not None and result.steps >= cfg.max_steps:
                    stopped = True
                    break

            val_iou = _val_iou(model, val_records)
            entry = {
                "epoch": epoch + 1,
                "steps": result.steps,
                "lr": lr,
                "train_loss": float(np.mean(losses)) if losses else None,
                "val_iou": val_iou,
            }
            result.history.append(entry)
            val_text = f"{val_iou:.4f}" if val_iou is not None else "n/a"
            logger.info(f"Epoch {epoch + 1}/{cfg.epochs} lr={lr:.3e} loss={entry['train_loss']:.4f} val_iou={val_text}")

            score = val_iou if val_iou is not None else -entry["train_loss"]
            if out_dir is not None:
                result.last_path = save_checkpoint(out_dir / LAST_NAME, model, train_cfg, epoch + 1,
                                                   rng_state=rng_state)
                if result.best_score is None or score > result.best_score:
                    result.best_path = save_checkpoint(out_dir / BEST_NAME, model, train_cfg, epoch + 1,
                                                       rng_state=rng_state, extra={"val_iou": val_iou})
                (out_dir / HISTORY_NAME).write_text(json.dumps(result.history, indent=2), encoding="utf-8")
            if result.best_score is None or score > result.best_score:
                result.best_score = score
            if stopped:
                break
    finally:
        producer.stop()
    return result


def train(model: StateDiffNet, train_manifest: Manifest, val_manifest: Optional[Manifest], cfg: TrainConfig,
          out_dir: Union[str, Path]) -> TrainResult:
    records = list(iter_pairs(train_manifest))
    val_records = list(iter_pairs(val_manifest)) if val_manifest is not None else []
    logger.info(f"Training on {len(records)} pairs from {train_manifest.path}, validating on {len(val_records)}")
    return train_records(model, records, cfg, val_records, out_dir)
