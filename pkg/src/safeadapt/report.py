"""Aggregate metrics across seeds into mean/std tables and simple SVG charts."""

from __future__ import annotations

import math
from collections import defaultdict
from pathlib import Path

from .metrics import MetricsRow, read_metrics


def collect_rows(in_dir: str | Path) -> list[MetricsRow]:
    rows: list[MetricsRow] = []
    for path in sorted(Path(in_dir).rglob("metrics.csv")):
        rows.extend(read_metrics(path))
    return rows


def _mean_std(values: list[float]) -> tuple[float, float]:
    n = len(values)
    mean = sum(values) / n
    if n < 2:
        return mean, 0.0
    var = sum((v - mean) ** 2 for v in values) / (n - 1)
    return mean, math.sqrt(var)


def aggregate(rows: list[MetricsRow]) -> dict:
    """Group by (phase, strategy, iteration) and average each metric over seeds."""
    grouped: dict[tuple[str, str, int], dict[str, list[float]]] = defaultdict(
        lambda: defaultdict(list)
    )
    for row in rows:
        key = (row.phase, row.strategy, row.iteration)
        grouped[key]["avg_timestep_reward"].append(row.avg_timestep_reward)
        grouped[key]["avg_timestep_cost"].append(row.avg_timestep_cost)
        grouped[key]["total"].append(row.total)
    out: dict[tuple[str, str, int], dict[str, tuple[float, float]]] = {}
    for key, metrics in grouped.items():
        out[key] = {name: _mean_std(vals) for name, vals in metrics.items()}
    return out


def summary_table(rows: list[MetricsRow]) -> str:
    """Final-iteration mean +- std per (phase, strategy), as plain text."""
    agg = aggregate(rows)
    finals: dict[tuple[str, str], int] = {}
    for phase, strategy, iteration in agg:
        key = (phase, strategy)
        finals[key] = max(finals.get(key, -1), iteration)
    lines = [
        f"{'phase':<10} {'strategy':<9} {'iter':>5} "
        f"{'reward':>18} {'cost':>18} {'total':>18}"
    ]
    for (phase, strategy), iteration in sorted(finals.items()):
        metrics = agg[(phase, strategy, iteration)]
        cells = []
        for name in ("avg_timestep_reward", "avg_timestep_cost", "total"):
            mean, std = metrics[name]
            cells.append(f"{mean:+.4f} +- {std:.4f}")
        lines.append(
            f"{phase:<10} {strategy:<9} {iteration:>5} "
            f"{cells[0]:>18} {cells[1]:>18} {cells[2]:>18}"
        )
    return "\n".join(lines) + "\n"


_SVG_COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]


def line_chart_svg(
    series: dict[str, list[tuple[float, float]]],
    title: str,
    width: int = 640,
    height: int = 360,
) -> str:
    """Minimal polyline chart; one colored line per named series."""
    margin = 48
    points = [p for pts in series.values() for p in pts]
    if not points:
        return f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}"/>'
    xs = [p[0] for p in points]
    ys = [p[1] for p in points]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 1.0

    def sx(x: float) -> float:
        return margin + (x - x0) / (x1 - x0) * (width - 2 * margin)

    def sy(y: float) -> float:
        return height - margin - (y - y0) / (y1 - y0) * (height - 2 * margin)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<text x="{width / 2:.0f}" y="20" text-anchor="middle" '
        f'font-family="sans-serif" font-size="14">{title}</text>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
        f'y2="{height - margin}" stroke="#333"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" '
        f'stroke="#333"/>',
        f'<text x="{margin}" y="{height - margin + 16}" font-family="sans-serif" '
        f'font-size="10">{x0:.0f}</text>',
        f'<text x="{width - margin}" y="{height - margin + 16}" text-anchor="end" '
        f'font-family="sans-serif" font-size="10">{x1:.0f}</text>',
        f'<text x="{margin - 4}" y="{height - margin}" text-anchor="end" '
        f'font-family="sans-serif" font-size="10">{y0:.3f}</text>',
        f'<text x="{margin - 4}" y="{margin + 4}" text-anchor="end" '
        f'font-family="sans-serif" font-size="10">{y1:.3f}</text>',
    ]
    for i, (name, pts) in enumerate(sorted(series.items())):
        color = _SVG_COLORS[i % len(_SVG_COLORS)]
        coords = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in pts)
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" '
                     f'points="{coords}"/>')
        parts.append(
            f'<text x="{width - margin + 4}" y="{margin + 14 * i + 10}" '
            f'font-family="sans-serif" font-size="11" fill="{color}">{name}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts)


def write_report(in_dir: str | Path, out_file: str | Path, charts: bool = True) -> None:
    rows = collect_rows(in_dir)
    out_file = Path(out_file)
    out_file.parent.mkdir(parents=True, exist_ok=True)
    out_file.write_text(summary_table(rows))
    if not charts or not rows:
        return
    agg = aggregate(rows)
    for phase in sorted({k[0] for k in agg}):
        for metric in ("avg_timestep_reward", "avg_timestep_cost", "total"):
            series: dict[str, list[tuple[float, float]]] = defaultdict(list)
            for (ph, strategy, iteration), metrics in sorted(agg.items()):
                if ph == phase:
                    series[strategy].append((iteration, metrics[metric][0]))
            if series:
                svg = line_chart_svg(dict(series), f"{phase}: {metric} (mean over seeds)")
                chart_path = out_file.with_name(f"{out_file.stem}_{phase}_{metric}.svg")
                chart_path.write_text(svg)
