"""Per-iteration metrics rows and their deterministic CSV form."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

METRICS_HEADER = (
    "run_id,seed,strategy,phase,iteration,target_id,avg_timestep_reward,"
    "avg_timestep_cost,total,J_c,stage,violation_rate"
)


class MetricsError(Exception):
    pass


@dataclass(frozen=True)
class MetricsRow:
    run_id: str
    seed: int
    strategy: str
    phase: str
    iteration: int
    target_id: int
    avg_timestep_reward: float
    avg_timestep_cost: float
    total: float
    j_c: float
    stage: str
    violation_rate: float


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def format_row(row: MetricsRow) -> str:
    return ",".join(
        [
            row.run_id,
            str(row.seed),
            row.strategy,
            row.phase,
            str(row.iteration),
            str(row.target_id),
            _fmt(row.avg_timestep_reward),
            _fmt(row.avg_timestep_cost),
            _fmt(row.total),
            _fmt(row.j_c),
            row.stage,
            _fmt(row.violation_rate),
        ]
    )


def write_metrics(rows: list[MetricsRow], path: str | Path) -> None:
    """Write the fixed header and one formatted row per iteration."""
    lines = [METRICS_HEADER]
    lines.extend(format_row(r) for r in rows)
    Path(path).write_text("\n".join(lines) + "\n", newline="\n")


def read_metrics(path: str | Path) -> list[MetricsRow]:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or ",".join(header) != METRICS_HEADER:
            raise MetricsError(f"{path}: unexpected metrics header")
        rows = []
        for rec in reader:
            if len(rec) != 12:
                raise MetricsError(f"{path}: malformed row {rec!r}")
            rows.append(
                MetricsRow(
                    run_id=rec[0],
                    seed=int(rec[1]),
                    strategy=rec[2],
                    phase=rec[3],
                    iteration=int(rec[4]),
                    target_id=int(rec[5]),
                    avg_timestep_reward=float(rec[6]),
                    avg_timestep_cost=float(rec[7]),
                    total=float(rec[8]),
                    j_c=float(rec[9]),
                    stage=rec[10],
                    violation_rate=float(rec[11]),
                )
            )
    return rows
