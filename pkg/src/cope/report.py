"""Render metric tables and forest plots from persisted run artifacts."""

from __future__ import annotations

import csv
import io
import json
from typing import Any, Sequence
from xml.sax.saxutils import escape

from .stats import ForestRow, MetricReport

METRIC_LABELS = {"mae": "MAE", "acc": "ACC", "within1_acc": "±1 ACC"}
TABLE_COLUMNS = (
    "model",
    "n",
    "n_excluded",
    "mae",
    "mae_ci_lo",
    "mae_ci_hi",
    "acc",
    "acc_ci_lo",
    "acc_ci_hi",
    "within1_acc",
    "within1_acc_ci_lo",
    "within1_acc_ci_hi",
)


def metrics_row(model: str, report: MetricReport) -> dict[str, Any]:
    row: dict[str, Any] = {"model": model, "n": report.n, "n_excluded": report.n_excluded}
    for key in METRIC_LABELS:
        ci = report.ci_95.get(key)
        row[key] = report.point[key]
        row[f"{key}_ci_lo"] = ci[0] if ci else None
        row[f"{key}_ci_hi"] = ci[1] if ci else None
    return row


def _cell(v: Any) -> Any:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6f}"
    return v


def metrics_table_csv(rows: Sequence[dict[str, Any]]) -> str:
    """One line per model, three metrics with their 95% bounds."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TABLE_COLUMNS)
    for row in rows:
        writer.writerow([_cell(row.get(c)) for c in TABLE_COLUMNS])
    return buf.getvalue()


def metrics_table_json(rows: Sequence[dict[str, Any]], bootstrap: dict[str, Any] | None = None) -> str:
    return json.dumps({"bootstrap": bootstrap or {}, "rows": list(rows)}, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def format_estimate(point: float, lo: float | None, hi: float | None, pct: bool = False) -> str:
    """``1.01 (0.92–1.11)`` style text; accuracies as percentages when ``pct``."""
    scale, fmt = (100.0, "{:.1f}") if pct else (1.0, "{:.2f}")
    text = fmt.format(point * scale)
    if lo is not None and hi is not None:
        text += f" ({fmt.format(lo * scale)}–{fmt.format(hi * scale)})"
    return text


# ---------------------------------------------------------------------------
# SVG forest plot

_ROW_H = 22
_LEFT = 230
_PLOT_W = 360
_RIGHT = 200
_TOP = 40


def _ticks(hi: float) -> list[float]:
    step = 0.25 if hi <= 1.5 else 0.5 if hi <= 3 else 1.0
    out, v = [], 0.0
    while v <= hi + 1e-9:
        out.append(round(v, 2))
        v += step
    return out


def forest_svg(rows: Sequence[ForestRow], title: str = "MAE by subgroup", overall: float | None = None) -> str:
    """A self-contained SVG: one line per band with its point estimate and CI whisker."""
    values = [v for r in rows for v in (r.mae, r.ci_hi) if v is not None]
    x_max = max(values + [overall or 0.0, 0.5]) * 1.1
    ticks = _ticks(x_max)
    x_max = max(x_max, ticks[-1])

    def x(v: float) -> float:
        return _LEFT + _PLOT_W * v / x_max

    lines: list[tuple[str, ForestRow | None]] = []
    current = None
    for r in rows:
        if r.axis != current:
            lines.append((r.axis, None))
            current = r.axis
        lines.append((r.band, r))

    height = _TOP + _ROW_H * (len(lines) + 2)
    width = _LEFT + _PLOT_W + _RIGHT
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="14" font-weight="bold">{escape(title)}</text>',
        f'<text x="{_LEFT + _PLOT_W + 10}" y="{_TOP - 8}" font-weight="bold">MAE (95% CI)</text>',
    ]
    bottom = _TOP + _ROW_H * len(lines)
    for i, (label, row) in enumerate(lines):
        y = _TOP + _ROW_H * i + _ROW_H / 2
        if row is None:
            out.append(f'<text x="10" y="{y + 4:.1f}" font-weight="bold">{escape(label)}</text>')
            continue
        out.append(f'<text x="24" y="{y + 4:.1f}">{escape(label)} (n = {row.n})</text>')
        if row.mae is None:
            out.append(f'<text x="{_LEFT + _PLOT_W + 10}" y="{y + 4:.1f}" fill="#777">no data</text>')
            continue
        if row.ci_lo is not None and row.ci_hi is not None:
            out.append(
                f'<line x1="{x(row.ci_lo):.1f}" y1="{y:.1f}" x2="{x(row.ci_hi):.1f}" y2="{y:.1f}" stroke="black"/>'
            )
        out.append(f'<rect x="{x(row.mae) - 4:.1f}" y="{y - 4:.1f}" width="8" height="8" fill="#1f4e79"/>')
        out.append(
            f'<text x="{_LEFT + _PLOT_W + 10}" y="{y + 4:.1f}">{format_estimate(row.mae, row.ci_lo, row.ci_hi)}</text>'
        )
    out.append(f'<line x1="{_LEFT}" y1="{bottom}" x2="{_LEFT + _PLOT_W}" y2="{bottom}" stroke="black"/>')
    for t in ticks:
        out.append(f'<line x1="{x(t):.1f}" y1="{bottom}" x2="{x(t):.1f}" y2="{bottom + 4}" stroke="black"/>')
        out.append(f'<text x="{x(t):.1f}" y="{bottom + 16}" text-anchor="middle">{t:g}</text>')
    if overall is not None:
        out.append(
            f'<line x1="{x(overall):.1f}" y1="{_TOP}" x2="{x(overall):.1f}" y2="{bottom}" '
            'stroke="#999" stroke-dasharray="4 3"/>'
        )
    out.append("</svg>")
    return "\n".join(out) + "\n"
