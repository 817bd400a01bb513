"""
Brute-force and closed-form oracles for the lab's core computations.

Each suite returns an OracleResult; none raises on a failed check. The CLI
`oracle` subcommand runs all of them, `gradcheck` runs gradcheck_all().
"""
import csv
import logging
import math
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .. import utils
from ..models import InvalidArgumentError, Split
from .assembly import enumerate_states, load_catalog, part_diff, sample_state, sample_state_pair, validate_state
from .attention import (
    SelfAttentionParams, gca_reference, gca_weights, global_cross_attention, lca_weights, linear_attention,
    linear_attention_reference, linear_self_attention, local_cross_attention,
)
from .dataset import GenConfig, generate_dataset, generate_pair
from .evaluation import CSV_HEADER, EvalReport, EvalRow, aggregate_rows, change_iou
from .geometry import SQRT2, Quaternion, nqd
from .kernels import (
    GradCheckReport, Tensor, add, bias_add, concat, conv2d, grad_check, max_pool2x, relu, softmax_cross_entropy,
    upsample2x,
)
from .rasterizer import RenderedView, RenderParams, change_mask, diff_membership_mask
from .report_generator import ReportGenerator

logger = logging.getLogger(__name__)

ATTENTION_TOLERANCE = 1e-6
GRAD_TOLERANCE = 1e-4
SCALING_SIDES = (8, 16, 32, 64)
LINEAR_MAX_EXPONENT = 1.3
QUADRATIC_MIN_EXPONENT = 1.7


@dataclass
class OracleResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


def _random_unit_quaternion(rng: np.random.Generator) -> Quaternion:
    v = rng.normal(size=4)
    return Quaternion.from_array(v / np.linalg.norm(v))


def _max_abs(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))))


# --- Geometry and assembly ---

def check_nqd(samples: int = 1000, seed: int = 0) -> OracleResult:
    """nQD against 2 sin(theta / 4) on random relative rotations."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    largest = 0.0
    for _ in range(samples):
        q = _random_unit_quaternion(rng)
        if nqd(q, q) != 0.0 or nqd(q, -q) != 0.0:
            return OracleResult("nqd", False, "nqd(q, q) or nqd(q, -q) is not exactly 0")
        theta = rng.uniform(0.0, math.pi)
        rel = Quaternion.from_axis_angle(rng.normal(size=3), theta)
        value = nqd(q, (q * rel).normalized())
        worst = max(worst, abs(value - 2.0 * math.sin(theta / 4.0)))
        largest = max(largest, value)
    passed = worst < 1e-9 and largest <= SQRT2 + 1e-12
    return OracleResult("nqd", passed, f"max |nqd - 2 sin(theta/4)| = {worst:.2e}, max nqd = {largest:.4f}")


def check_state_sampling(samples: int = 2000, pairs: int = 200, seed: int = 0) -> OracleResult:
    """Sampled states are valid members of the exhaustive enumeration; diff counts match set algebra."""
    catalog = load_catalog()
    rng = np.random.default_rng(seed)
    universe = enumerate_states(catalog)
    seen = set()
    for _ in range(samples):
        state = sample_state(catalog, rng)
        validate_state(catalog, state)
        if state.present not in universe:
            return OracleResult("state_sampling", False, f"sampled state {sorted(state.present)} not enumerable")
        seen.add(state.present)

    for _ in range(pairs):
        a, b = sample_state_pair(catalog, 1, 6, None, rng)
        brute = bin(utils.bitmask(a.present) ^ utils.bitmask(b.present)).count("1")
        diff = part_diff(a, b)
        if diff.count != brute or not 1 <= brute <= 6:
            return OracleResult("state_sampling", False, f"diff count {diff.count} vs symmetric difference {brute}")
    return OracleResult("state_sampling", True,
                        f"{len(seen)} distinct of {len(universe)} reachable states, {pairs} pair diffs agree")


def check_change_mask(pairs: int = 100, image_size: int = 64, seed: int = 0) -> OracleResult:
    """Instance-inequality mask equals the diff-membership mask on generated pairs."""
    catalog = load_catalog()
    config = GenConfig(name="oracle", split=Split.TRAIN, count=pairs, seed=seed,
                       render=RenderParams(image_size=image_size))
    for pair_id in range(pairs):
        record = generate_pair(config, catalog, pair_id)
        aligned = RenderedView(
            rgb=record.sample.rgb,
            instance=record.aligned_instance,
            pose=record.anchor.pose,
            state=record.sample.state,
        )
        expected = diff_membership_mask(record.anchor, aligned, record.diff)
        if not np.array_equal(change_mask(record.anchor, aligned), expected):
            return OracleResult("change_mask", False, f"pair {pair_id}: masks differ")
        if np.any(change_mask(record.anchor, record.anchor)):
            return OracleResult("change_mask", False, f"pair {pair_id}: change_mask(v, v) is not empty")
    return OracleResult("change_mask", True, f"{pairs} pairs at {image_size}x{image_size} agree")


def check_dataset_determinism(count: int = 6, seed: int = 7) -> OracleResult:
    """Same seed, different worker counts, byte-identical manifests."""
    config = GenConfig(name="train", split=Split.TRAIN, count=count, seed=seed,
                       render=RenderParams(image_size=64))
    with tempfile.TemporaryDirectory() as tmp:
        serial = generate_dataset(config, Path(tmp) / "serial", jobs=1)
        parallel = generate_dataset(config, Path(tmp) / "parallel", jobs=2)
        same = serial.path.read_bytes() == parallel.path.read_bytes()
    detail = f"{count} pairs, jobs 1 vs 2: " + ("identical" if same else "manifests differ")
    return OracleResult("dataset_determinism", same, detail)


# --- Attention ---

def check_gca_bruteforce(seed: int = 0) -> OracleResult:
    rng = np.random.default_rng(seed)
    f1, f2 = rng.normal(size=(2, 8, 5, 4))
    out = global_cross_attention(Tensor(f1), Tensor(f2)).data
    err = _max_abs(out, gca_reference(f1, f2))
    return OracleResult("gca_bruteforce", err < ATTENTION_TOLERANCE, f"max abs error {err:.2e}")


def check_softmax_weights(seed: int = 0) -> OracleResult:
    rng = np.random.default_rng(seed)
    f1, f2 = rng.normal(size=(2, 2, 8, 6, 6))
    gw = gca_weights(f1, f2)
    lw = lca_weights(f1, f2, 5)
    err = max(_max_abs(gw.sum(axis=-1), 1.0), _max_abs(lw.sum(axis=(-2, -1)), 1.0))
    passed = err < ATTENTION_TOLERANCE and gw.min() >= 0.0 and lw.min() >= 0.0
    return OracleResult("softmax_weights", passed, f"max |row sum - 1| = {err:.2e}")


def check_lca_full_window(seed: int = 0) -> OracleResult:
    rng = np.random.default_rng(seed)
    f1, f2 = rng.normal(size=(2, 8, 6, 5))
    window = 2 * max(f1.shape[1:]) - 1
    local = local_cross_attention(Tensor(f1), Tensor(f2), window).data
    err = _max_abs(local, global_cross_attention(Tensor(f1), Tensor(f2)).data)
    return OracleResult("lca_full_window", err < ATTENTION_TOLERANCE, f"window {window}: max abs error {err:.2e}")


def check_lca_window_one(seed: int = 0) -> OracleResult:
    rng = np.random.default_rng(seed)
    f1, f2 = rng.normal(size=(2, 8, 6, 6))
    out = local_cross_attention(Tensor(f1), Tensor(f2), 1).data
    err = _max_abs(out[8:], f2)
    return OracleResult("lca_window_one", err < 1e-12, f"max abs error {err:.2e}")


def check_gca_permutation(seed: int = 0) -> OracleResult:
    """Jointly permuting f2's locations leaves the attended output unchanged."""
    rng = np.random.default_rng(seed)
    c, h, w = 8, 6, 6
    f1, f2 = rng.normal(size=(2, c, h, w))
    perm = rng.permutation(h * w)
    f2p = f2.reshape(c, h * w)[:, perm].reshape(c, h, w)
    err = _max_abs(global_cross_attention(Tensor(f1), Tensor(f2)).data,
                   global_cross_attention(Tensor(f1), Tensor(f2p)).data)
    return OracleResult("gca_permutation", err < ATTENTION_TOLERANCE, f"max abs error {err:.2e}")


def check_linear_attention(seed: int = 0) -> OracleResult:
    rng = np.random.default_rng(seed)
    q, k, v = rng.normal(size=(3, 16, 6, 5))
    out = linear_attention(Tensor(q[None]), Tensor(k[None]), Tensor(v[None]), heads=4).data[0]
    err = _max_abs(out, linear_attention_reference(q, k, v, heads=4))
    return OracleResult("linear_attention_quadratic", err < ATTENTION_TOLERANCE, f"max abs error {err:.2e}")


def softmax_attention_reference(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Single-head softmax(Q K^T / sqrt(d)) V for one (C, H, W) map."""
    c, h, w = q.shape
    qs, ks, vs = (t.reshape(c, h * w).T for t in (q, k, v))
    logits = qs @ ks.T / math.sqrt(c)
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return ((e / e.sum(axis=1, keepdims=True)) @ vs).T.reshape(c, h, w)


def check_linear_is_not_softmax(seed: int = 0) -> OracleResult:
    rng = np.random.default_rng(seed)
    q, k, v = rng.normal(size=(3, 4, 3, 3)) * 2.0
    linear = linear_attention(Tensor(q[None]), Tensor(k[None]), Tensor(v[None]), heads=1).data[0]
    gap = _max_abs(linear, softmax_attention_reference(q, k, v))
    return OracleResult("linear_is_not_softmax", gap > 1e-3, f"max abs difference {gap:.3f}")


# --- Gradients ---

def _grad_cases(rng: np.random.Generator) -> List[tuple]:
    target = rng.integers(0, 2, size=(2, 4, 4))
    away_from_kink = rng.uniform(0.1, 1.0, size=(2, 3, 4, 4)) * rng.choice([-1.0, 1.0], size=(2, 3, 4, 4))
    msa = SelfAttentionParams.create(8, rng, dtype=np.float64)
    return [
        ("conv2d", lambda x, w: conv2d(x, w), [(2, 3, 6, 6), (4, 3, 3, 3)]),
        ("conv2d_stride2", lambda x, w: conv2d(x, w, stride=2), [(1, 2, 6, 6), (3, 2, 3, 3)]),
        ("bias_add", bias_add, [(2, 3, 4, 4), (3,)]),
        ("relu", relu, [away_from_kink]),
        ("max_pool2x", max_pool2x, [(2, 3, 4, 4)]),
        ("upsample2x", upsample2x, [(1, 2, 3, 3)]),
        ("concat", lambda a, b: concat([a, b], axis=1), [(2, 2, 3, 3), (2, 3, 3, 3)]),
        ("add", add, [(2, 3, 3, 3), (2, 3, 3, 3)]),
        ("softmax_cross_entropy", lambda x: softmax_cross_entropy(x, target), [(2, 2, 4, 4)]),
        ("global_cross_attention", global_cross_attention, [(1, 4, 3, 3), (1, 4, 3, 3)]),
        ("local_cross_attention", lambda a, b: local_cross_attention(a, b, 3), [(1, 4, 4, 4), (1, 4, 4, 4)]),
        ("linear_attention", lambda q, k, v: linear_attention(q, k, v, heads=2),
         [(1, 8, 3, 3), (1, 8, 3, 3), (1, 8, 3, 3)]),
        ("linear_self_attention", lambda f: linear_self_attention(f, msa, heads=2), [(1, 8, 4, 4)]),
    ]


def gradcheck_all(tolerance: float = GRAD_TOLERANCE, seed: int = 0) -> List[GradCheckReport]:
    """Central-difference check of every differentiable op, double precision."""
    rng = np.random.default_rng(seed)
    reports = []
    for name, op, inputs in _grad_cases(rng):
        report = grad_check(op, inputs, tolerance=tolerance, rng=rng, name=name)
        logger.info(f"grad_check {name}: {report.max_rel_error:.2e} ({'ok' if report.passed else 'FAIL'})")
        reports.append(report)
    return reports


def check_gradients(seed: int = 0) -> OracleResult:
    reports = gradcheck_all(seed=seed)
    failed = [r.name for r in reports if not r.passed]
    worst = max(r.max_rel_error for r in reports)
    detail = f"{len(reports)} ops, worst relative error {worst:.2e}"
    if failed:
        detail += f", failed: {', '.join(failed)}"
    return OracleResult("gradients", not failed, detail)


# --- Evaluation ---

def _parse_row(raw: Dict[str, str]) -> EvalRow:
    def opt(value: str) -> Optional[float]:
        return None if value == "" else float(value)

    return EvalRow(
        pair_id=int(raw["pair_id"]),
        split=raw["split"],
        nqd=float(raw["nqd"]),
        diff_count=int(raw["diff_count"]),
        only_in_a=int(raw["only_in_a"]),
        only_in_b=int(raw["only_in_b"]),
        iou=float(raw["iou"]),
        iou_anchor_origin=opt(raw["iou_anchor_origin"]),
        iou_sample_origin=opt(raw["iou_sample_origin"]),
    )


def check_eval_consistency(rows: int = 200, seed: int = 0) -> OracleResult:
    """Aggregates recomputed from the written per-pair CSV equal the in-memory ones."""
    if change_iou(np.zeros((4, 4)), np.zeros((4, 4))) != 1.0:
        return OracleResult("eval_consistency", False, "empty/empty IoU is not 1.0")
    rng = np.random.default_rng(seed)
    generated = []
    for pair_id in range(rows):
        only_a = int(rng.integers(0, 4))
        only_b = int(rng.integers(0 if only_a else 1, 4))
        generated.append(EvalRow(
            pair_id=pair_id,
            split=Split.TEST_SEEN_POSE.value,
            nqd=float(rng.uniform(0.0, 0.4)),
            diff_count=only_a + only_b,
            only_in_a=only_a,
            only_in_b=only_b,
            iou=float(rng.random()),
            iou_anchor_origin=float(rng.random()) if only_a else None,
            iou_sample_origin=float(rng.random()) if only_b else None,
        ))
    report = EvalReport(split=Split.TEST_SEEN_POSE.value, rows=generated, aggregates=aggregate_rows(generated))
    with tempfile.TemporaryDirectory() as tmp:
        path = ReportGenerator(tmp).write_rows(report)
        with open(path, newline="", encoding="utf-8") as f:
            reader = csv.DictReader(f)
            header_ok = reader.fieldnames == CSV_HEADER
            parsed = [_parse_row(raw) for raw in reader]
    same = header_ok and aggregate_rows(parsed) == report.aggregates
    return OracleResult("eval_consistency", same,
                        f"{rows} rows, {len(report.aggregates)} aggregates " + ("match" if same else "differ"))


# --- Scaling ---

def _best_time(fn: Callable[[], object], repeats: int) -> float:
    best = math.inf
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def _fitted_exponent(sizes: Sequence[int], seconds: Sequence[float]) -> float:
    slope, _ = np.polyfit(np.log(sizes), np.log(seconds), 1)
    return float(slope)


def measure_scaling(sides: Sequence[int] = SCALING_SIDES, channels: int = 32, heads: int = 4,
                    repeats: int = 3, seed: int = 0) -> dict:
    """
    Runtime of linear attention and of its explicit N x N expansion over square
    maps; exponents are least-squares slopes of log time against log N, N = H * W.
    """
    rng = np.random.default_rng(seed)
    table = []
    for side in sides:
        q, k, v = rng.normal(size=(3, channels, side, side))
        tq, tk, tv = Tensor(q[None]), Tensor(k[None]), Tensor(v[None])
        linear = _best_time(lambda: linear_attention(tq, tk, tv, heads), repeats)
        quadratic = _best_time(lambda: linear_attention_reference(q, k, v, heads), repeats)
        table.append({"side": side, "tokens": side * side, "linear_s": linear, "quadratic_s": quadratic})
    tokens = [row["tokens"] for row in table]
    return {
        "table": table,
        "linear_exponent": _fitted_exponent(tokens, [row["linear_s"] for row in table]),
        "quadratic_exponent": _fitted_exponent(tokens, [row["quadratic_s"] for row in table]),
    }


def check_scaling() -> OracleResult:
    result = measure_scaling()
    lin, quad = result["linear_exponent"], result["quadratic_exponent"]
    passed = lin < LINEAR_MAX_EXPONENT and quad > QUADRATIC_MIN_EXPONENT
    return OracleResult("attention_scaling", passed, f"linear exponent {lin:.2f}, quadratic exponent {quad:.2f}")


SUITES: Dict[str, Callable[[], OracleResult]] = {
    "nqd": check_nqd,
    "state_sampling": check_state_sampling,
    "change_mask": check_change_mask,
    "dataset_determinism": check_dataset_determinism,
    "gca_bruteforce": check_gca_bruteforce,
    "softmax_weights": check_softmax_weights,
    "lca_full_window": check_lca_full_window,
    "lca_window_one": check_lca_window_one,
    "gca_permutation": check_gca_permutation,
    "linear_attention_quadratic": check_linear_attention,
    "linear_is_not_softmax": check_linear_is_not_softmax,
    "gradients": check_gradients,
    "eval_consistency": check_eval_consistency,
    "attention_scaling": check_scaling,
}


def run_oracles(names: Optional[Sequence[str]] = None) -> List[OracleResult]:
    selected = list(names) if names else list(SUITES)
    unknown = [n for n in selected if n not in SUITES]
    if unknown:
        raise InvalidArgumentError(f"unknown oracle suite(s) {unknown}, expected some of {sorted(SUITES)}")

    results = []
    for name in selected:
        start = time.perf_counter()
        result = SUITES[name]()
        result.seconds = time.perf_counter() - start
        level = logging.INFO if result.passed else logging.ERROR
        logger.log(level, f"oracle {name}: {'pass' if result.passed else 'FAIL'} ({result.detail})")
        results.append(result)
    return results
