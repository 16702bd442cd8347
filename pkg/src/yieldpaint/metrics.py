"""Reconstruction error and rating-monotonicity metrics."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from yieldpaint.surface import YieldSurface

BPS = 1e4


@dataclass(frozen=True)
class MetricsReport:
    mae_bps: float
    mae_pct: float
    rmse_bps: float
    rmse_pct: float
    mono_violation_pct: float
    n_surfaces: int
    n_cells: int
    percent_defined: bool = True

    def as_row(self) -> dict:
        return asdict(self)


def _stack(surfaces) -> np.ndarray:
    arrs = [s.values if isinstance(s, YieldSurface) else np.asarray(s, dtype=np.float64) for s in surfaces]
    if not arrs:
        raise ValueError("no surfaces given")
    return np.stack(arrs)


def monotonicity_violations(surfaces, tol: float = 1e-12) -> float:
    """Percentage of adjacent rating pairs where the worse rating yields less.

    Counted over every surface, every tenor and every adjacent pair
    (rating i+1 minus rating i).
    """
    v = _stack(surfaces)
    if v.shape[1] < 2:
        raise ValueError("need at least two ratings")
    diff = v[:, 1:, :] - v[:, :-1, :]
    return float(100.0 * np.count_nonzero(diff < -tol) / diff.size)


def error_metrics(truth: Sequence, recon: Sequence, cells: np.ndarray | None = None) -> MetricsReport:
    """MAE/RMSE in bps and percent of the true yield, pooled over all cells.

    ``cells`` optionally restricts the pooled cells, e.g. to masked cells only;
    it is a boolean array broadcastable to (n, R, T).
    """
    t = _stack(truth)
    r = _stack(recon)
    if len(t) != len(r):
        raise ValueError(f"{len(t)} truth surfaces but {len(r)} reconstructions")
    if t.shape != r.shape:
        raise ValueError(f"grid mismatch: {t.shape[1:]} vs {r.shape[1:]}")
    sel = np.ones(t.shape, dtype=bool) if cells is None else np.broadcast_to(np.asarray(cells, bool), t.shape)
    err = (r - t)[sel]
    tv = t[sel]
    if err.size == 0:
        raise ValueError("no cells selected")
    mae = float(np.abs(err).mean())
    rmse = float(np.sqrt((err ** 2).mean()))
    defined = bool(np.all(tv > 0))
    if defined:
        rel = np.abs(err) / tv
        mae_pct = float(100.0 * rel.mean())
        rmse_pct = float(100.0 * np.sqrt((rel ** 2).mean()))
    else:
        mae_pct = rmse_pct = float("nan")
    return MetricsReport(
        mae_bps=mae * BPS,
        mae_pct=mae_pct,
        rmse_bps=rmse * BPS,
        rmse_pct=rmse_pct,
        mono_violation_pct=monotonicity_violations(r),
        n_surfaces=len(t),
        n_cells=int(err.size),
        percent_defined=defined,
    )


REPORT_COLUMNS = ("method", "masking", "mae_bps", "mae_pct", "rmse_bps", "rmse_pct",
                  "mono_violation_pct", "n_surfaces", "n_cells")


def write_report(rows: Sequence[tuple[str, str, MetricsReport]], path) -> None:
    """One CSV row per (method, masking), values rounded to 2 decimals."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for method, masking, rep in sorted(rows, key=lambda x: (x[0], x[1])):
            w.writerow([
                method, masking,
                f"{rep.mae_bps:.2f}", f"{rep.mae_pct:.2f}",
                f"{rep.rmse_bps:.2f}", f"{rep.rmse_pct:.2f}",
                f"{rep.mono_violation_pct:.2f}", rep.n_surfaces, rep.n_cells,
            ])


def read_report(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        for k in REPORT_COLUMNS[2:7]:
            row[k] = float(row[k])
        row["n_surfaces"] = int(row["n_surfaces"])
        row["n_cells"] = int(row["n_cells"])
    return rows
