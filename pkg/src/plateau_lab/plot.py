"""SVG line charts of metrics CSVs."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from plateau_lab import trainer  # noqa: E402

LOG_SCALE = {"ddr", "kl_behavior", "grad_norm_pre", "grad_norm_post", "param_update_l2"}

_ATTR = {
    "mean_return": "mean_return", "solve_rate": "solve_rate", "kl_behavior": "mean_kl_behavior", "ddr": "ddr",
    "grad_norm_pre": "pre_clip_grad_norm", "grad_norm_post": "post_clip_grad_norm",
    "param_update_l2": "param_update_l2", "entropy": "entropy", "lr": "lr_effective",
}


def plot_runs(runs: Sequence[str | Path], out: str | Path, columns: Sequence[str] = ("solve_rate", "kl_behavior"),
              labels: Sequence[str] | None = None) -> Path:
    """One panel per column, one line per run, x axis in env steps."""
    for c in columns:
        if c not in _ATTR:
            raise ValueError(f"unknown column {c!r}; choose from {sorted(_ATTR)}")
    labels = list(labels) if labels else [Path(r).name for r in runs]
    fig, axes = plt.subplots(len(columns), 1, figsize=(7, 2.6 * len(columns)), sharex=True, squeeze=False)
    for run, label in zip(runs, labels):
        recs = trainer.read_metrics(run)
        x = [r.env_steps for r in recs]
        for ax, col in zip(axes[:, 0], columns):
            ax.plot(x, [getattr(r, _ATTR[col]) for r in recs], label=label, lw=1.2)
    for ax, col in zip(axes[:, 0], columns):
        ax.set_ylabel(col)
        if col in LOG_SCALE:
            ax.set_yscale("log")
        ax.grid(alpha=0.3)
    axes[-1, 0].set_xlabel("env steps")
    axes[0, 0].legend(fontsize=7)
    fig.tight_layout()
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    # fixed hash salt and no date metadata keep the SVG reproducible
    plt.rcParams["svg.hashsalt"] = "plateau_lab"
    fig.savefig(out, format="svg", metadata={"Date": None})
    plt.close(fig)
    return out
