"""Fold metrics CSVs into a per-class text table and an SVG line chart."""
from __future__ import annotations

import os

from .errors import FormatError
from .metrics import read_metrics_csv

__all__ = ["run_summary", "render_table", "render_chart", "write_report"]

_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
           "#8c564b", "#e377c2", "#7f7f7f")


def run_summary(run_dir) -> dict:
    """Last metrics row of a run plus its full mIoU/Prob history."""
    path = os.path.join(run_dir, "metrics.csv")
    cols, rows = read_metrics_csv(path)
    if not rows:
        raise FormatError(f"{path}: no metrics rows")
    idx = {c: i for i, c in enumerate(cols)}
    iou_cols = [c for c in cols if c.startswith("iou_")]
    last = rows[-1]
    return {
        "name": os.path.basename(os.path.normpath(run_dir)),
        "iters": [int(r[idx["iter"]]) for r in rows],
        "miou": [r[idx["miou"]] for r in rows],
        "prob": [r[idx["prob"]] for r in rows],
        "final_miou": last[idx["miou"]],
        "final_iou": [last[idx[c]] for c in iou_cols],
        "classes": len(iou_cols),
    }


def render_table(summaries: list[dict]) -> str:
    """Per-class IoU table, one run per row, classes in id order."""
    if not summaries:
        return "(no runs)\n"
    n_cls = max(s["classes"] for s in summaries)
    name_w = max(len(s["name"]) for s in summaries)
    name_w = max(name_w, len("run"))
    header = ["run".ljust(name_w)] + [f"class_{i:>2}" for i in range(n_cls)] + ["mIoU"]
    lines = ["  ".join(header)]
    for s in summaries:
        cells = [s["name"].ljust(name_w)]
        for i in range(n_cls):
            v = s["final_iou"][i] if i < len(s["final_iou"]) else float("nan")
            cells.append(f"{v:8.4f}")
        cells.append(f"{s['final_miou']:.4f}")
        lines.append("  ".join(cells))
    return "\n".join(lines) + "\n"


def _polyline(xs, ys, x0, y0, w, h, x_max, color, dashed=False) -> str:
    if not xs:
        return ""
    pts = []
    for x, y in zip(xs, ys):
        if y != y:  # skip NaN points
            continue
        px = x0 + (x / max(x_max, 1)) * w
        py = y0 + h - max(0.0, min(1.0, y)) * h
        pts.append(f"{px:.1f},{py:.1f}")
    if not pts:
        return ""
    dash = ' stroke-dasharray="6,4"' if dashed else ""
    return (f'<polyline fill="none" stroke="{color}" stroke-width="1.5"{dash} '
            f'points="{" ".join(pts)}"/>')


def render_chart(summaries: list[dict]) -> str:
    """SVG line chart: solid mIoU and dashed Prob curves versus iteration."""
    width, height = 640, 400
    x0, y0, w, h = 60, 20, width - 90, height - 70
    x_max = max((max(s["iters"]) for s in summaries if s["iters"]), default=1)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{x0}" y1="{y0 + h}" x2="{x0 + w}" y2="{y0 + h}" stroke="black"/>',
        f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y0 + h}" stroke="black"/>',
    ]
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        py = y0 + h - frac * h
        parts.append(f'<line x1="{x0 - 4}" y1="{py:.1f}" x2="{x0}" y2="{py:.1f}" '
                     f'stroke="black"/>')
        parts.append(f'<text x="{x0 - 8}" y="{py + 4:.1f}" font-size="11" '
                     f'text-anchor="end">{frac:.2f}</text>')
    parts.append(f'<text x="{x0 + w / 2:.0f}" y="{height - 12}" font-size="12" '
                 f'text-anchor="middle">iteration (max {x_max})</text>')
    legend_y = y0 + 10
    for i, s in enumerate(summaries):
        color = _COLORS[i % len(_COLORS)]
        parts.append(_polyline(s["iters"], s["miou"], x0, y0, w, h, x_max, color))
        parts.append(_polyline(s["iters"], s["prob"], x0, y0, w, h, x_max, color,
                               dashed=True))
        parts.append(f'<text x="{x0 + w - 4}" y="{legend_y}" font-size="11" '
                     f'text-anchor="end" fill="{color}">{s["name"]} '
                     f'(solid mIoU, dashed Prob)</text>')
        legend_y += 14
    parts.append("</svg>")
    return "\n".join(p for p in parts if p) + "\n"


def write_report(run_dirs: list[str], out_dir) -> str:
    """Emit report.txt and chart.svg for the given runs; returns the table."""
    summaries = [run_summary(d) for d in run_dirs]
    table = render_table(summaries)
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "report.txt"), "w") as fh:
        fh.write(table)
    with open(os.path.join(out_dir, "chart.svg"), "w") as fh:
        fh.write(render_chart(summaries))
    return table
