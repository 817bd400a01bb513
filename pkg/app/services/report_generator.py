import csv
import logging
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
from PIL import Image, ImageDraw

from .evaluation import (
    AGGREGATE_HEADER, CSV_HEADER, EvalReport, Panel, compare_reports, origin_gap,
)
from .model import AttentionMap
from .pdf_generator import ReportPdfGenerator

logger = logging.getLogger(__name__)

COMPARISON_HEADER = ["stratum", "metric", "base_median", "other_median", "abs_delta", "rel_delta"]


def _cell(value) -> str:
    # empty cell for undefined values, shortest round-trip repr for floats
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]):
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(v) for v in row])


class ReportGenerator:
    def __init__(self, out_dir: Union[str, Path]):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)

        # Colors
        self.color_box = "#ea580c"
        self.color_median = "#0f172a"
        self.color_gt = (34, 197, 94)
        self.color_pred = (234, 88, 12)
        self.color_query = (220, 38, 38)

    # --- Tables ---

    def write_rows(self, report: EvalReport) -> Path:
        path = self.out_dir / "rows.csv"
        _write_csv(path, CSV_HEADER, [row.as_list() for row in sorted(report.rows, key=lambda r: r.pair_id)])
        return path

    def write_aggregates(self, report: EvalReport) -> Path:
        path = self.out_dir / "aggregates.csv"
        _write_csv(path, AGGREGATE_HEADER, [agg.as_list() for agg in report.aggregates])
        return path

    def write_comparison(self, base: EvalReport, other: EvalReport) -> Path:
        path = self.out_dir / "comparison.csv"
        rows = compare_reports(base, other)
        _write_csv(path, COMPARISON_HEADER, [[r[k] for k in COMPARISON_HEADER] for r in rows])
        return path

    def write_origin_gap(self, report: EvalReport) -> Path:
        path = self.out_dir / "origin_gap.csv"
        header = ["stratum", "anchor_median", "sample_median", "abs_delta", "rel_delta"]
        rows = []
        if report.aggregates:
            gap = origin_gap(report)
            rows.append([gap[k] for k in header])
        _write_csv(path, header, rows)
        return path

    # --- Box plot ---

    def write_boxplot(self, report: EvalReport, metric: str = "iou") -> Path:
        """Median, quartile box and min/max whiskers per stratum, from the aggregates alone."""
        stats = [
            {
                "label": agg.stratum,
                "med": agg.median,
                "q1": agg.q1,
                "q3": agg.q3,
                "whislo": agg.min,
                "whishi": agg.max,
                "fliers": [],
            }
            for agg in report.aggregates
            if agg.metric == metric and agg.count > 0
        ]
        path = self.out_dir / "boxplot.svg"
        with plt.rc_context({"svg.hashsalt": "statediff", "svg.fonttype": "none"}):
            fig, ax = plt.subplots(figsize=(10, 4))
            if stats:
                ax.bxp(stats, showfliers=False, patch_artist=True,
                       boxprops={"facecolor": self.color_box, "alpha": 0.6},
                       medianprops={"color": self.color_median})
                ax.tick_params(axis="x", labelrotation=30)
            ax.set_ylim(-0.02, 1.02)
            ax.set_ylabel(f"change {metric}")
            title = f"{report.split} ({report.label})" if report.label else report.split
            ax.set_title(title)
            fig.tight_layout()
            fig.savefig(path, format="svg", metadata={"Date": None})
            plt.close(fig)
        return path

    # --- Panels ---

    @staticmethod
    def _mask_tile(mask: np.ndarray, color: Tuple[int, int, int]) -> np.ndarray:
        tile = np.zeros(mask.shape + (3,), dtype=np.uint8)
        tile[mask.astype(bool)] = color
        return tile

    def panel_image(self, panel: Panel) -> Image.Image:
        """anchor | sample | ground truth | prediction, each one input wide."""
        tiles = [
            panel.anchor,
            panel.sample,
            self._mask_tile(panel.gt, self.color_gt),
            self._mask_tile(panel.pred, self.color_pred),
        ]
        return Image.fromarray(np.concatenate(tiles, axis=1), "RGB")

    def write_panels(self, report: EvalReport) -> list:
        if not report.panels:
            return []
        panel_dir = self.out_dir / "panels"
        panel_dir.mkdir(exist_ok=True)
        paths = []
        for panel in report.panels:
            path = panel_dir / f"pair_{panel.pair_id:08d}.png"
            self.panel_image(panel).save(path, format="PNG")
            paths.append(path)
        return paths

    # --- Attention ---

    def write_attention_overlay(self, anchor_rgb: np.ndarray, sample_rgb: np.ndarray, attn: AttentionMap,
                                query: Tuple[int, int], name: str = "attention.png") -> Path:
        """Anchor with the query marked, next to the sample blended with the heatmap."""
        colored = (matplotlib.colormaps["jet"](attn.heatmap)[..., :3] * 255).astype(np.uint8)
        sample = Image.fromarray(np.asarray(sample_rgb, dtype=np.uint8), "RGB")
        overlay = Image.blend(sample, Image.fromarray(colored, "RGB").resize(sample.size, Image.Resampling.NEAREST), 0.5)

        anchor = Image.fromarray(np.asarray(anchor_rgb, dtype=np.uint8), "RGB")
        draw = ImageDraw.Draw(anchor)
        x, y = query
        draw.line([(x - 3, y), (x + 3, y)], fill=self.color_query)
        draw.line([(x, y - 3), (x, y + 3)], fill=self.color_query)

        canvas = Image.new("RGB", (anchor.width + overlay.width, anchor.height))
        canvas.paste(anchor, (0, 0))
        canvas.paste(overlay, (anchor.width, 0))
        path = self.out_dir / name
        canvas.save(path, format="PNG")
        logger.info(f"Attention overlay written to {path}")
        return path


def emit_report(report: EvalReport, out_dir: Union[str, Path], baseline: Optional[EvalReport] = None,
                pdf: bool = True) -> list:
    """
    Write rows.csv, aggregates.csv, origin_gap.csv, boxplot.svg, the
    qualitative panels, comparison.csv when a baseline is given, and report.pdf.
    """
    generator = ReportGenerator(out_dir)
    written = [
        generator.write_rows(report),
        generator.write_aggregates(report),
        generator.write_origin_gap(report),
        generator.write_boxplot(report),
    ]
    written.extend(generator.write_panels(report))
    if baseline is not None:
        written.append(generator.write_comparison(baseline, report))
    if pdf:
        written.append(ReportPdfGenerator().generate_pdf(report, Path(out_dir) / "report.pdf"))
    logger.info(f"Report for '{report.split}' written to {out_dir} ({len(written)} files)")
    return written
