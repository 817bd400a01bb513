import enum
from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional, Tuple

import numpy as np

if TYPE_CHECKING:
    from .services.assembly import PartDiff
    from .services.rasterizer import RenderedView

# --- Enums ---

class Split(str, enum.Enum):
    TRAIN = "train"
    TEST_SEEN_POSE = "test_seen_pose"
    TEST_NOVEL_POSE = "test_novel_pose"

class Mechanism(str, enum.Enum):
    GCA = "gca"
    LCA = "lca"
    GCA_MSA = "gca_msa"
    CONCAT_ONLY = "concat_only"

    @classmethod
    def parse(cls, value: str) -> "Mechanism":
        # CLI spelling "concat" maps to concat_only
        if value == "concat":
            return cls.CONCAT_ONLY
        return cls(value)

class Scale(str, enum.Enum):
    TINY = "tiny"
    SMALL = "small"

class BackgroundStyle(str, enum.Enum):
    FLAT = "flat"
    NOISE = "noise"

# --- Errors ---

class StateDiffError(Exception):
    """Base class for every error raised by the lab."""

class InvalidArgumentError(StateDiffError, ValueError):
    pass

class ValidationError(StateDiffError, ValueError):
    """A document or object violates one of its invariants."""

    def __init__(self, invariant: str, detail: str = ""):
        self.invariant = invariant
        message = f"{invariant}: {detail}" if detail else invariant
        super().__init__(message)

class GenerationError(StateDiffError):
    pass

class RenderError(StateDiffError):
    pass

class CropError(StateDiffError):
    pass

class ShapeError(StateDiffError, ValueError):
    def __init__(self, op: str, shape_a, shape_b):
        self.shape_a = tuple(shape_a)
        self.shape_b = tuple(shape_b)
        super().__init__(f"{op}: incompatible shapes {self.shape_a} and {self.shape_b}")

class NumericalError(StateDiffError, ArithmeticError):
    pass

class ChecksumError(StateDiffError):
    def __init__(self, path, expected: str, actual: str):
        self.path = str(path)
        super().__init__(f"checksum mismatch for {path}: expected {expected[:12]}…, got {actual[:12]}…")

class TrainingDivergedError(StateDiffError):
    def __init__(self, epoch: int, step: int, loss: float):
        self.epoch = epoch
        self.step = step
        self.loss = loss
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, step {step}")

class UnsupportedMechanismError(StateDiffError):
    pass

# --- Records ---

@dataclass
class PairRecord:
    """
    One training/evaluation unit. mask was computed at the anchor pose from the
    anchor render and the hidden render of the sample state at that pose,
    whose instance map is kept as aligned_instance.
    """
    anchor: "RenderedView"
    sample: "RenderedView"
    mask: np.ndarray
    aligned_instance: np.ndarray
    nqd_value: float
    diff: "PartDiff"
    pair_id: int
    split: Split
    crop_window: Optional[Tuple[int, int, int, int]] = None   # (row0, col0, height, width) in render pixels
