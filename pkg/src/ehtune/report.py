"""Tabulate run records into CSV tables, projection files and SVG charts."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .errors import ContractError
from .metrics import grad_norm_summary, smoothed, steps_to_threshold
from .trainer import RunRecord

RESULT_COLUMNS = (
    "strategy",
    "task",
    "seed",
    "final_metric",
    "metric_name",
    "feature_change_pre_final",
    "feature_change_stage1_final",
    "param_distance_final",
    "steps_to_threshold",
    "grad_ratio_window",
    "stage1_steps",
    "stage2_steps",
)
NUMERIC_COLUMNS = (
    "final_metric",
    "feature_change_pre_final",
    "feature_change_stage1_final",
    "param_distance_final",
    "steps_to_threshold",
    "grad_ratio_window",
)
THRESHOLD_FACTOR = 0.5


def stage2_threshold_steps(record: RunRecord, factor: float = THRESHOLD_FACTOR):
    """Steps into the final stage until the smoothed loss drops below ``factor`` x the run's first loss."""
    if record.initial_loss is None or not record.initial_loss > 0:
        return None
    return steps_to_threshold(record.final_stage_losses(), factor * record.initial_loss)


def result_row(record: RunRecord) -> dict:
    try:
        ratio = grad_norm_summary(record.grad_norms)[2]
    except ContractError:
        ratio = None
    return {
        "strategy": record.strategy,
        "task": record.task,
        "seed": record.seed,
        "final_metric": record.final_metric,
        "metric_name": record.metric_name,
        "feature_change_pre_final": record.feature_change.get("pre_final"),
        "feature_change_stage1_final": record.feature_change.get("stage1_final"),
        "param_distance_final": record.param_distance_final,
        "steps_to_threshold": stage2_threshold_steps(record),
        "grad_ratio_window": ratio,
        "stage1_steps": record.stage1_steps,
        "stage2_steps": record.stage2_steps,
    }


def result_rows(records) -> list[dict]:
    rows = [result_row(r) for r in records]
    return sorted(rows, key=lambda r: (r["strategy"], r["task"], r["seed"]))


def aggregate_rows(rows: list[dict]) -> list[dict]:
    """Mean and sample sd per (strategy, task) for every numeric column.

    Missing values (two-stage-only columns, never-reached thresholds) are
    skipped; ``n_<col>`` records how many seeds contributed.
    """
    groups: dict = {}
    for r in rows:
        groups.setdefault((r["strategy"], r["task"]), []).append(r)
    out = []
    for (strategy, task), rs in sorted(groups.items()):
        agg = {"strategy": strategy, "task": task, "metric_name": rs[0]["metric_name"], "n_seeds": len(rs)}
        for col in NUMERIC_COLUMNS:
            vals = np.array([r[col] for r in rs if r[col] is not None], dtype=np.float64)
            agg[f"mean_{col}"] = float(vals.mean()) if vals.size else None
            agg[f"sd_{col}"] = float(vals.std(ddof=1)) if vals.size > 1 else (0.0 if vals.size else None)
            agg[f"n_{col}"] = int(vals.size)
        out.append(agg)
    return out


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def csv_text(rows: list[dict], columns=None) -> str:
    if not rows and columns is None:
        return ""
    columns = list(columns or rows[0])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in columns])
    return buf.getvalue()


def projection_csv(record: RunRecord) -> str | None:
    if not record.projection:
        return None
    rows = [{"x": x, "y": y, "label": lab, "split": split} for x, y, lab, split in record.projection["points"]]
    return csv_text(rows, ("x", "y", "label", "split"))


def load_records(runs_dir) -> list[RunRecord]:
    """Every run-record JSON below ``runs_dir`` (sidecars and other JSON are skipped)."""
    records = []
    for path in sorted(Path(runs_dir).rglob("*.json")):
        if path.name.endswith(".meta.json"):
            continue
        try:
            body = json.loads(path.read_text())
        except (json.JSONDecodeError, UnicodeDecodeError):
            continue
        if isinstance(body, dict) and {"plan", "losses", "task"} <= set(body):
            body.pop("config", None)  # config echo written by `ehtune run`
            records.append(RunRecord.from_dict(body))
    return records


# ---------------------------------------------------------------- svg

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f")


def line_chart_svg(series: dict, title: str, xlabel: str, ylabel: str, width: int = 640, height: int = 400) -> str:
    """Minimal standalone SVG line chart; ``series`` maps a label to (xs, ys)."""
    left, right, top, bottom = 60, 150, 30, 45
    pw, ph = width - left - right, height - top - bottom
    pts = [(x, y) for xs, ys in series.values() for x, y in zip(xs, ys) if np.isfinite(y)]
    if pts:
        x0, x1 = min(p[0] for p in pts), max(p[0] for p in pts)
        y0, y1 = min(p[1] for p in pts), max(p[1] for p in pts)
    else:
        x0, x1, y0, y1 = 0.0, 1.0, 0.0, 1.0
    x1 = x1 if x1 > x0 else x0 + 1
    y1 = y1 if y1 > y0 else y0 + 1

    def sx(x):
        return left + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return top + ph - (y - y0) / (y1 - y0) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{left}" y="18" font-size="14" font-family="sans-serif">{escape(title)}</text>',
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
    ]
    for frac in (0.0, 0.5, 1.0):
        xv, yv = x0 + frac * (x1 - x0), y0 + frac * (y1 - y0)
        out.append(f'<text x="{sx(xv):.1f}" y="{top + ph + 15}" font-size="10" text-anchor="middle">{xv:.4g}</text>')
        out.append(f'<text x="{left - 5}" y="{sy(yv) + 3:.1f}" font-size="10" text-anchor="end">{yv:.4g}</text>')
    out.append(
        f'<text x="{left + pw / 2:.1f}" y="{height - 8}" font-size="12" text-anchor="middle">{escape(xlabel)}</text>'
    )
    out.append(
        f'<text x="14" y="{top + ph / 2:.1f}" font-size="12" text-anchor="middle" '
        f'transform="rotate(-90 14 {top + ph / 2:.1f})">{escape(ylabel)}</text>'
    )
    for i, (label, (xs, ys)) in enumerate(series.items()):
        color = _PALETTE[i % len(_PALETTE)]
        coords = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in zip(xs, ys) if np.isfinite(y))
        if coords:
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{coords}"/>')
        ly = top + 15 * i + 10
        out.append(f'<line x1="{left + pw + 10}" y1="{ly}" x2="{left + pw + 30}" y2="{ly}" stroke="{color}"/>')
        out.append(f'<text x="{left + pw + 35}" y="{ly + 4}" font-size="11">{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _mean_curve(curves: list) -> np.ndarray:
    n = min(len(c) for c in curves)
    return np.mean([np.asarray(c[:n], dtype=np.float64) for c in curves], axis=0)


def task_charts(records, window: int = 10) -> dict[str, str]:
    """Seed-averaged loss and parameter-distance charts, one pair per task."""
    by_task: dict = {}
    for r in records:
        by_task.setdefault(r.task, {}).setdefault(r.strategy, []).append(r)
    charts = {}
    for task, groups in sorted(by_task.items()):
        losses, dists = {}, {}
        for strategy, rs in sorted(groups.items()):
            if all(r.losses for r in rs):
                curve = smoothed(_mean_curve([r.losses for r in rs]), window)
                losses[strategy] = (np.arange(len(curve)), curve)
            if all(r.param_distance for r in rs):
                d = _mean_curve([[v for _, v in r.param_distance] for r in rs])
                steps = [s for s, _ in rs[0].param_distance][: len(d)]
                dists[strategy] = (np.asarray(steps), d)
        charts[f"{task}_loss.svg"] = line_chart_svg(losses, f"{task}: training loss", "step", "loss")
        charts[f"{task}_distance.svg"] = line_chart_svg(
            dists, f"{task}: distance to pretrained weights", "step", "squared L2"
        )
    return charts
