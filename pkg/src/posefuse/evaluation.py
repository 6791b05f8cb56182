"""Accuracy and timing metrics, improvement tables and report rendering."""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import geometry as geo
from .errors import ValidationError

CSV_COLUMNS = ("model", "median_et_m", "mean_et_m", "median_er_deg", "mean_er_deg", "mapst_s")
MARKDOWN_HEADER = ("Model Name", "Median e_t (m)", "Mean e_t (m)", "Median e_r (°)",
                   "Mean e_r (°)", "MAPST (s)")
MISSING = "-"
MAPST_BATCH = 10


class LengthMismatch(ValidationError):
    pass


class InsufficientSamples(ValidationError):
    pass


class ZeroBaseline(ValidationError):
    pass


@dataclass(frozen=True)
class MetricsReport:
    model: str
    median_et: float | None
    mean_et: float | None
    median_er: float | None
    mean_er: float | None
    mapst: float | None = None

    def values(self) -> tuple:
        return (self.median_et, self.mean_et, self.median_er, self.mean_er, self.mapst)


@dataclass(frozen=True)
class ImprovementRow:
    model: str
    et_improvement_pct: int
    er_improvement_pct: int
    timing_overhead_ms: float | None


def mae(preds, gts) -> float:
    preds, gts = np.asarray(preds, dtype=float), np.asarray(gts, dtype=float)
    if preds.shape != gts.shape:
        raise LengthMismatch(f"{preds.shape} vs {gts.shape}")
    if preds.size == 0:
        raise InsufficientSamples("MAE of an empty sequence")
    return float(np.mean(np.abs(preds - gts)))


def lower_median(values) -> float:
    """Median; for even counts the lower of the two central values."""
    v = np.sort(np.asarray(values, dtype=float).ravel())
    if v.size == 0:
        raise InsufficientSamples("median of an empty sequence")
    return float(v[(v.size - 1) // 2])


def per_sample_errors(preds, gts) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample translation error (m) and rotation error (deg) for (N, 7) poses."""
    preds, gts = np.asarray(preds, dtype=float), np.asarray(gts, dtype=float)
    if preds.shape != gts.shape:
        raise LengthMismatch(f"predictions {preds.shape} vs ground truth {gts.shape}")
    if preds.ndim != 2 or preds.shape[1] != 7:
        raise ValidationError(f"poses must be (N, 7), got {preds.shape}")
    et = np.atleast_1d(geo.translation_error_m(preds[:, :3], gts[:, :3]))
    er = np.atleast_1d(geo.rotation_error_deg(preds[:, 3:], gts[:, 3:]))
    return et, er


def pose_error_stats(preds, gts) -> tuple[float, float, float, float]:
    """(median e_t, mean e_t, median e_r, mean e_r)."""
    et, er = per_sample_errors(preds, gts)
    return lower_median(et), float(et.mean()), lower_median(er), float(er.mean())


def metrics_report(name: str, preds, gts, mapst: float | None = None) -> MetricsReport:
    return MetricsReport(name, *pose_error_stats(preds, gts), mapst)


def measure_mapst(predict: Callable[[Sequence], object], samples: Sequence, repeats: int = 3,
                  batch_size: int = MAPST_BATCH, clock: Callable[[], float] = time.perf_counter) -> float:
    """Mean per-sample processing time in seconds.

    ``predict`` is called on consecutive batches of ten samples.  Each
    repetition's total time is divided by the sample count; the slowest
    repetition is dropped and the rest averaged.
    """
    n = len(samples)
    if n < batch_size:
        raise InsufficientSamples(f"MAPST needs at least {batch_size} samples, got {n}")
    if repeats < 3:
        raise ValidationError("MAPST needs at least 3 repetitions")
    usable = n - n % batch_size
    per_sample = []
    for _ in range(repeats):
        start = clock()
        for i in range(0, usable, batch_size):
            predict(samples[i:i + batch_size])
        per_sample.append((clock() - start) / usable)
    per_sample.sort()
    kept = per_sample[:-1]
    return float(sum(kept) / len(kept))


def _pct(base: float, value: float) -> int:
    return int(np.floor(100.0 * (base - value) / base + 0.5))


def improvement_table(baseline: MetricsReport, others: Sequence[MetricsReport]) -> list[ImprovementRow]:
    """Relative median improvement (%) of each model over the baseline, plus timing overhead (ms)."""
    if not baseline.median_et or not baseline.median_er or baseline.median_et <= 0 or baseline.median_er <= 0:
        raise ZeroBaseline(f"baseline {baseline.model} needs positive median errors")
    rows = []
    for r in others:
        overhead = None
        if r.mapst is not None and baseline.mapst is not None:
            overhead = (r.mapst - baseline.mapst) * 1000.0
        rows.append(ImprovementRow(r.model, _pct(baseline.median_et, r.median_et),
                                   _pct(baseline.median_er, r.median_er), overhead))
    return rows


# ----------------------------------------------------------------- rendering

def _fmt(v) -> str:
    return MISSING if v is None else f"{v:.3f}"


def render_report(reports: Sequence[MetricsReport], fmt: str = "csv") -> str:
    if not reports:
        raise ValidationError("nothing to render")
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in reports:
            w.writerow([r.model, *(_fmt(v) for v in r.values())])
        return buf.getvalue()
    if fmt == "markdown":
        lines = ["| " + " | ".join(MARKDOWN_HEADER) + " |",
                 "|" + "|".join(["---"] + [":---:"] * (len(MARKDOWN_HEADER) - 1)) + "|"]
        for r in reports:
            lines.append("| " + " | ".join([r.model, *(_fmt(v) for v in r.values())]) + " |")
        return "\n".join(lines) + "\n"
    raise ValidationError(f"format must be 'csv' or 'markdown', got {fmt!r}")


def parse_report_csv(text: str) -> list[MetricsReport]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != CSV_COLUMNS:
        raise ValidationError(f"unexpected report header {rows[0] if rows else None}")
    out = []
    for row in rows[1:]:
        if not row:
            continue
        vals = [None if v == MISSING else float(v) for v in row[1:]]
        out.append(MetricsReport(row[0], *vals))
    return out


def render_improvements(rows: Sequence[ImprovementRow], fmt: str = "csv") -> str:
    header = ("model", "et_improvement_pct", "er_improvement_pct", "timing_overhead_ms")
    cells = [[r.model, str(r.et_improvement_pct), str(r.er_improvement_pct),
              MISSING if r.timing_overhead_ms is None else f"{r.timing_overhead_ms:.0f}"] for r in rows]
    if fmt == "csv":
        return "\n".join(",".join(c) for c in [list(header), *cells]) + "\n"
    if fmt == "markdown":
        lines = ["| Model Name | Improvement e_t (%) | Improvement e_r (%) | Timing Overhead (ms) |",
                 "|---|:---:|:---:|:---:|"]
        lines += ["| " + " | ".join(c) + " |" for c in cells]
        return "\n".join(lines) + "\n"
    raise ValidationError(f"format must be 'csv' or 'markdown', got {fmt!r}")


def trajectory_svg(gt_xz: np.ndarray, pred_xz: dict[str, np.ndarray], width: int = 480,
                   height: int = 360, margin: int = 20) -> str:
    """SVG polylines of ground-truth and predicted x-z ground tracks."""
    palette = ["#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]
    allpts = np.vstack([gt_xz, *pred_xz.values()]) if pred_xz else gt_xz
    lo, hi = allpts.min(axis=0), allpts.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    scale = min((width - 2 * margin) / span[0], (height - 2 * margin) / span[1])

    def pts(xz):
        x = margin + (xz[:, 0] - lo[0]) * scale
        y = height - margin - (xz[:, 1] - lo[1]) * scale
        return " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(x, y))

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<polyline points="{pts(gt_xz)}" fill="none" stroke="black" stroke-width="1.5">'
             '<title>ground truth</title></polyline>']
    for i, (name, xz) in enumerate(pred_xz.items()):
        parts.append(f'<polyline points="{pts(xz)}" fill="none" stroke="{palette[i % len(palette)]}" '
                     f'stroke-width="1" stroke-opacity="0.8"><title>{name}</title></polyline>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
