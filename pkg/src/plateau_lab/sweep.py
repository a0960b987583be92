"""Grid sweeps over config keys, one run directory per cell and seed.

``summary.csv`` has one row per run: the swept values, the seed, and the
run-level statistics (max and tail solve rate, aggregate DDR). Everything in
it can be recomputed from the run's own ``metrics.csv``.
"""

from __future__ import annotations

import csv
import itertools
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats

from plateau_lab import metrics, trainer
from plateau_lab.config import TrainConfig, _format, apply_overrides

# default learning-rate tuning axis when a sweep asks for one
LR_TUNING_GRID = {"lr": [1e-4, 3e-4, 1e-3], "lr_anneal": [True, False]}

SUMMARY_STATS = ("updates", "env_steps", "max_solve_rate", "tail_solve_rate", "final_solve_rate", "ddr_aggregate")


@dataclass(frozen=True)
class Cell:
    values: tuple[tuple[str, object], ...]
    seed: int

    @property
    def name(self) -> str:
        parts = [f"{k}={_format(v)}" for k, v in self.values] + [f"seed={self.seed}"]
        return "_".join(parts).replace("/", "-")


def expand_grid(grid: dict[str, Sequence], seeds: Sequence[int]) -> list[Cell]:
    keys = list(grid)
    for k in keys:
        apply_overrides(TrainConfig(), {k: grid[k][0]})  # reject unknown keys early
    combos = itertools.product(*(grid[k] for k in keys)) if keys else [()]
    return [Cell(tuple(zip(keys, combo)), int(s)) for combo in combos for s in seeds]


def tail_mean(values: Sequence[float], frac: float = 0.25) -> float:
    """Mean over the last ``frac`` of a series (at least one element)."""
    if not len(values):
        return math.nan
    n = max(1, int(round(len(values) * frac)))
    return float(np.mean(values[-n:]))


def summarize(records: list[metrics.MetricsRecord], final_solve_rate: float) -> dict:
    sr = [r.solve_rate for r in records]
    finite = [r.ddr for r in records if math.isfinite(r.ddr)]
    return {
        "updates": len(records),
        "env_steps": records[-1].env_steps if records else 0,
        "max_solve_rate": max(sr, default=final_solve_rate),
        "tail_solve_rate": tail_mean(sr) if sr else final_solve_rate,
        "final_solve_rate": final_solve_rate,
        "ddr_aggregate": metrics.run_ddr_aggregate(finite) if finite else math.nan,
    }


def _run_cell(base: TrainConfig, cell: Cell, out_dir: Path) -> dict:
    cfg = apply_overrides(base, dict(cell.values) | {"seed": cell.seed})
    res = trainer.train(cfg, out_dir / "runs" / cell.name)
    return summarize(res.records, res.final_eval.solve_rate)


def run_sweep(base: TrainConfig, grid: dict[str, Sequence], seeds: Sequence[int], out_dir: str | Path,
              workers: int = 1) -> list[dict]:
    """Train every cell of ``grid`` for every seed and write ``summary.csv``.

    With ``workers > 1`` cells run in separate processes; each owns its run
    directory, so the results do not depend on scheduling.
    """
    out_dir = Path(out_dir)
    cells = expand_grid(grid, seeds)
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_run_cell, [base] * len(cells), cells, [out_dir] * len(cells)))
    else:
        results = [_run_cell(base, c, out_dir) for c in cells]
    rows = []
    for cell, res in zip(cells, results):
        row = {"run": cell.name, **{k: _format(v) for k, v in cell.values}, "seed": cell.seed}
        row.update(res)
        rows.append(row)
    write_summary(rows, out_dir / "summary.csv", list(grid))
    return rows


def write_summary(rows: list[dict], path: Path, axes: list[str]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fields = ["run", *axes, "seed", *SUMMARY_STATS]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fields, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def read_summary(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        for k in SUMMARY_STATS:
            row[k] = float(row[k])
    return rows


def low_ddr_spearman(rows: list[dict]) -> tuple[float, int]:
    """Spearman rho between aggregate DDR and max solve rate among runs
    strictly below the sweep's median DDR. Returns (rho, n_runs)."""
    ddr = np.array([r["ddr_aggregate"] for r in rows], dtype=float)
    sr = np.array([r["max_solve_rate"] for r in rows], dtype=float)
    ok = np.isfinite(ddr)
    ddr, sr = ddr[ok], sr[ok]
    low = ddr < np.median(ddr)
    if low.sum() < 3:
        raise ValueError("need at least 3 runs below the median DDR")
    rho = stats.spearmanr(ddr[low], sr[low]).statistic
    return float(rho), int(low.sum())
