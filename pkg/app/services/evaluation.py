import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel

from ..models import PairRecord, ShapeError
from .dataset import iter_pairs
from .image_service import ImageService
from .model import stack_inputs

logger = logging.getLogger(__name__)

EVAL_MARGIN = 0.10
METRICS = ("iou", "iou_anchor_origin", "iou_sample_origin")

CSV_HEADER = ["pair_id", "split", "nqd", "diff_count", "only_in_a", "only_in_b",
              "iou", "iou_anchor_origin", "iou_sample_origin"]
AGGREGATE_HEADER = ["stratum", "metric", "count", "median", "q1", "q3", "mean", "min", "max"]

Predictor = Callable[[List[PairRecord]], List[np.ndarray]]


class StrataConfig(BaseModel):
    """
    nQD bins are (lo, hi] except the first, which is closed; diff bins are
    inclusive. With unseen_parts set, pairs whose diff touches any of those
    part ids form the unseen_parts stratum and the rest form seen_parts.
    """
    nqd_bins: List[Tuple[float, float]] = [(0.0, 0.1), (0.1, 0.2), (0.2, 0.3), (0.3, 0.4)]
    diff_bins: List[Tuple[int, int]] = [(1, 3), (4, 6), (7, 10)]
    unseen_parts: List[int] = []

    @classmethod
    def with_unseen_parts(cls, catalog, names: Iterable[str], **kwargs) -> "StrataConfig":
        return cls(unseen_parts=sorted(catalog.ids_of(names)), **kwargs)

    def strata(self) -> List[Tuple[str, Callable[["EvalRow"], bool]]]:
        out = [("all", lambda row: True)]
        for i, (lo, hi) in enumerate(self.nqd_bins):
            left = "[" if i == 0 else "("
            name = f"nqd{left}{lo:g},{hi:g}]"
            if i == 0:
                out.append((name, lambda row, lo=lo, hi=hi: lo <= row.nqd <= hi))
            else:
                out.append((name, lambda row, lo=lo, hi=hi: lo < row.nqd <= hi))
        for lo, hi in self.diff_bins:
            out.append((f"diff{lo}-{hi}", lambda row, lo=lo, hi=hi: lo <= row.diff_count <= hi))
        if self.unseen_parts:
            unseen = frozenset(self.unseen_parts)
            out.append(("unseen_parts", lambda row: bool(unseen.intersection(row.diff_parts))))
            out.append(("seen_parts", lambda row: not unseen.intersection(row.diff_parts)))
        return out


@dataclass
class EvalRow:
    pair_id: int
    split: str
    nqd: float
    diff_count: int
    only_in_a: int
    only_in_b: int
    iou: float
    iou_anchor_origin: Optional[float]
    iou_sample_origin: Optional[float]
    diff_parts: Tuple[int, ...] = ()

    def as_list(self) -> list:
        return [getattr(self, name) for name in CSV_HEADER]


@dataclass
class Aggregate:
    stratum: str
    metric: str
    count: int
    median: Optional[float] = None
    q1: Optional[float] = None
    q3: Optional[float] = None
    mean: Optional[float] = None
    min: Optional[float] = None
    max: Optional[float] = None

    def as_list(self) -> list:
        return [getattr(self, name) for name in AGGREGATE_HEADER]


@dataclass
class Panel:
    pair_id: int
    anchor: np.ndarray
    sample: np.ndarray
    gt: np.ndarray
    pred: np.ndarray


@dataclass
class EvalReport:
    split: str
    rows: List[EvalRow] = field(default_factory=list)
    aggregates: List[Aggregate] = field(default_factory=list)
    panels: List[Panel] = field(default_factory=list)
    label: str = ""

    def aggregate(self, stratum: str, metric: str = "iou") -> Aggregate:
        for agg in self.aggregates:
            if agg.stratum == stratum and agg.metric == metric:
                return agg
        raise KeyError(f"no aggregate for {stratum}/{metric}")


# --- Metrics ---

def change_iou(pred: np.ndarray, gt: np.ndarray) -> float:
    """IoU of the change class; 1.0 when both masks are empty."""
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ShapeError("change_iou", pred.shape, gt.shape)
    union = np.count_nonzero(pred | gt)
    if union == 0:
        return 1.0
    return np.count_nonzero(pred & gt) / union


def origin_footprints(record: PairRecord) -> Tuple[np.ndarray, np.ndarray]:
    """
    Pixels whose change comes from a part only in the anchor, and from a part
    only in the sample, both at the anchor pose. A pixel claimed by both sides
    belongs to the anchor side, so the two footprints are disjoint.
    """
    only_a = np.array(sorted(record.diff.only_in_a), dtype=np.int64)
    only_b = np.array(sorted(record.diff.only_in_b), dtype=np.int64)
    anchor_side = np.isin(record.anchor.instance, only_a)
    sample_side = np.isin(record.aligned_instance, only_b) & ~anchor_side
    return anchor_side, sample_side


def score_pair(record: PairRecord, pred: np.ndarray) -> EvalRow:
    gt = record.mask.astype(bool)
    pred = np.asarray(pred).astype(bool)
    anchor_side, sample_side = origin_footprints(record)
    iou_a = change_iou(pred & anchor_side, gt & anchor_side) if record.diff.only_in_a else None
    iou_b = change_iou(pred & sample_side, gt & sample_side) if record.diff.only_in_b else None
    return EvalRow(
        pair_id=record.pair_id,
        split=record.split.value,
        nqd=float(record.nqd_value),
        diff_count=record.diff.count,
        only_in_a=len(record.diff.only_in_a),
        only_in_b=len(record.diff.only_in_b),
        iou=change_iou(pred, gt),
        iou_anchor_origin=iou_a,
        iou_sample_origin=iou_b,
        diff_parts=tuple(sorted(record.diff.all_parts())),
    )


def summarize(stratum: str, metric: str, values: Sequence[float]) -> Aggregate:
    if len(values) == 0:
        return Aggregate(stratum=stratum, metric=metric, count=0)
    arr = np.asarray(values, dtype=np.float64)
    q1, median, q3 = np.percentile(arr, [25.0, 50.0, 75.0])
    return Aggregate(
        stratum=stratum,
        metric=metric,
        count=int(arr.size),
        median=float(median),
        q1=float(q1),
        q3=float(q3),
        mean=float(arr.mean()),
        min=float(arr.min()),
        max=float(arr.max()),
    )


def aggregate_rows(rows: Iterable[EvalRow], strata: Optional[StrataConfig] = None) -> List[Aggregate]:
    rows = sorted(rows, key=lambda r: r.pair_id)
    if not rows:
        return []
    strata = strata or StrataConfig()
    aggregates = []
    for name, member in strata.strata():
        selected = [r for r in rows if member(r)]
        for metric in METRICS:
            values = [getattr(r, metric) for r in selected if getattr(r, metric) is not None]
            agg = summarize(name, metric, values)
            if agg.count == 0 and metric == "iou":
                logger.warning(f"Empty stratum {name}")
            aggregates.append(agg)
    return aggregates


# --- Evaluation ---

def prepare_for_eval(record: PairRecord, input_size: int) -> PairRecord:
    """Deterministic ROI crop: 10% margin, no translation."""
    return ImageService.roi_crop(record, EVAL_MARGIN, rng=None, out_size=input_size, translate=False)


def model_predictor(model) -> Predictor:
    def predict(records: List[PairRecord]) -> List[np.ndarray]:
        anchors = stack_inputs([r.anchor.rgb for r in records], model.dtype)
        samples = stack_inputs([r.sample.rgb for r in records], model.dtype)
        return list(model.predict(anchors, samples))

    return predict


def _panel_indices(count: int, k: int) -> set:
    if count == 0 or k <= 0:
        return set()
    return set(int(i) for i in np.unique(np.linspace(0, count - 1, min(k, count)).round()))


def evaluate_records(records: Sequence[PairRecord], predictor: Predictor, input_size: int = 64,
                     split: str = "", batch_size: int = 16, panels: int = 4,
                     strata: Optional[StrataConfig] = None, label: str = "") -> EvalReport:
    records = sorted(records, key=lambda r: r.pair_id)
    keep = _panel_indices(len(records), panels)
    report = EvalReport(split=split or (records[0].split.value if records else ""), label=label)

    for start in range(0, len(records), batch_size):
        batch = [prepare_for_eval(r, input_size) for r in records[start:start + batch_size]]
        preds = predictor(batch)
        for offset, (rec, pred) in enumerate(zip(batch, preds)):
            report.rows.append(score_pair(rec, pred))
            if start + offset in keep:
                report.panels.append(Panel(rec.pair_id, rec.anchor.rgb, rec.sample.rgb, rec.mask,
                                           np.asarray(pred, dtype=np.uint8)))

    report.aggregates = aggregate_rows(report.rows, strata)
    logger.info(f"Evaluated {len(report.rows)} pairs of '{report.split}'")
    return report


def evaluate(model, manifest, strata: Optional[StrataConfig] = None, batch_size: int = 16, panels: int = 4,
             predictor: Optional[Predictor] = None) -> EvalReport:
    records = list(iter_pairs(manifest))
    return evaluate_records(
        records,
        predictor or model_predictor(model),
        input_size=model.arch.input_size if model is not None else 64,
        split=manifest.name,
        batch_size=batch_size,
        panels=panels,
        strata=strata,
        label=model.mechanism.value if model is not None else "",
    )


# --- Comparison ---

def _deltas(base: Optional[float], other: Optional[float]) -> Tuple[Optional[float], Optional[float]]:
    if base is None or other is None:
        return None, None
    absolute = other - base
    relative = absolute / base if base != 0 else None
    return absolute, relative


def compare_reports(base: EvalReport, other: EvalReport) -> List[dict]:
    """Per-stratum median deltas of other against base, in IoU points and relative to base."""
    rows = []
    other_index = {(a.stratum, a.metric): a for a in other.aggregates}
    for agg in base.aggregates:
        match = other_index.get((agg.stratum, agg.metric))
        other_median = match.median if match else None
        absolute, relative = _deltas(agg.median, other_median)
        rows.append({
            "stratum": agg.stratum,
            "metric": agg.metric,
            "base_median": agg.median,
            "other_median": other_median,
            "abs_delta": absolute,
            "rel_delta": relative,
        })
    return rows


def origin_gap(report: EvalReport, stratum: str = "all") -> dict:
    """Sample-origin median minus anchor-origin median, absolute and relative."""
    anchor = report.aggregate(stratum, "iou_anchor_origin").median
    sample = report.aggregate(stratum, "iou_sample_origin").median
    absolute, relative = _deltas(anchor, sample)
    return {"stratum": stratum, "anchor_median": anchor, "sample_median": sample,
            "abs_delta": absolute, "rel_delta": relative}
