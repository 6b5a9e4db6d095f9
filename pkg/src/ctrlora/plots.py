"""Figures rendered from the CSV files the CLI writes.

Plotting reads the delimited output back from disk rather than touching
in-memory training state, so any figure can be regenerated from a run
directory alone.
"""
from __future__ import annotations

import csv
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .experiment import curve_means, read_curve_csv  # noqa: E402

# no timestamps or version strings in the PNG so reruns give identical bytes
_PNG_META = {"Software": None}

STYLE = {
    "figure.figsize": (6.4, 4.0),
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
    "font.size": 9,
}


def _read_metrics(path: str | Path) -> dict[str, list[float]]:
    cols: dict[str, list[float]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            for k, v in row.items():
                cols.setdefault(k, []).append(float(v) if v not in ("", None) else math.nan)
    return cols


def plot_metrics(metrics_csv: str | Path, out_png: str | Path) -> Path:
    """Task loss, penalty and eval loss against step."""
    m = _read_metrics(metrics_csv)
    with plt.rc_context(STYLE):
        fig, (ax_loss, ax_pen) = plt.subplots(2, 1, sharex=True, figsize=(6.4, 5.2))
        ax_loss.plot(m["step"], m["task_loss"], lw=1.0, label="train batch")
        ev = [(s, e) for s, e in zip(m["step"], m["eval_loss"]) if not math.isnan(e)]
        if ev:
            ax_loss.plot(*zip(*ev), "o-", ms=3, lw=1.0, label="eval")
        ax_loss.set_yscale("log")
        ax_loss.set_ylabel("task loss")
        ax_loss.legend()
        ax_pen.plot(m["step"], m["penalty_value"], lw=1.0, color="C2")
        ax_pen.set_ylabel(r"$\sum\|AB^\top\|_M^2$")
        ax_pen.set_xlabel("step")
        fig.tight_layout()
        out = Path(out_png)
        fig.savefig(out, dpi=120, metadata=_PNG_META)
        plt.close(fig)
    return out


def plot_budget_curve(curve_csv: str | Path, out_png: str | Path) -> Path:
    """Mean final loss per method against budget fraction, with per-seed points."""
    cells = read_curve_csv(curve_csv)
    means = curve_means(cells)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for k, method in enumerate(sorted({c.method for c in cells})):
            pts = [(c.budget_fraction, c.final_loss) for c in cells if c.method == method and c.status == "ok"]
            if pts:
                ax.scatter(*zip(*pts), s=10, alpha=0.4, color=f"C{k}")
            line = sorted((b, v) for (b, mm), v in means.items() if mm == method)
            if line:
                ax.plot(*zip(*line), "o-", color=f"C{k}", label=method)
        ax.set_xscale("log")
        ax.set_xlabel("budget fraction")
        ax.set_ylabel("final eval loss")
        ax.legend()
        fig.tight_layout()
        out = Path(out_png)
        fig.savefig(out, dpi=120, metadata=_PNG_META)
        plt.close(fig)
    return out


def plot_run_dir(run_dir: str | Path) -> list[Path]:
    """Render every figure whose source CSV exists in ``run_dir``."""
    run_dir = Path(run_dir)
    made = []
    if (run_dir / "metrics.csv").exists():
        made.append(plot_metrics(run_dir / "metrics.csv", run_dir / "metrics.png"))
    if (run_dir / "budget_curve.csv").exists():
        made.append(plot_budget_curve(run_dir / "budget_curve.csv", run_dir / "budget_curve.png"))
    return made
