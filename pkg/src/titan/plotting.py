"""Figures written next to the CSV reports."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.ticker import MaxNLocator  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_history(history: list[dict], path) -> Path:
    """Validation MAE per epoch with the learning rate on a twin axis."""
    with plt.rc_context(STYLE):
        val = [r for r in history if r["split"] == "val" and r["horizon_step"] == "avg"]
        train = [r for r in history if r["split"] == "train"]
        fig, ax = plt.subplots(figsize=(5.0, 3.0))
        ax.plot([r["epoch"] for r in val], [r["mae"] for r in val], "o-", ms=3, label="val MAE")
        ax.set_xlabel("epoch")
        ax.xaxis.set_major_locator(MaxNLocator(integer=True))
        ax.set_ylabel("MAE (data units)")
        warm = [r["epoch"] for r in val if r["phase"] == "warmup"]
        if warm:
            ax.axvspan(0.5, max(warm) + 0.5, color="0.9", label="prior warmup")
        ax2 = ax.twinx()
        ax2.plot([r["epoch"] for r in train], [r["lr"] for r in train], color="C1", lw=1, label="lr")
        ax2.set_ylabel("learning rate")
        ax2.spines["right"].set_visible(True)
        lines = ax.get_legend_handles_labels()
        lines2 = ax2.get_legend_handles_labels()
        ax.legend(lines[0] + lines2[0], lines[1] + lines2[1], loc="upper right", frameon=False)
        return _save(fig, path)


def plot_horizons(rows, path, baseline=None) -> Path:
    """MAE/RMSE per horizon step; ``baseline`` rows are drawn dashed if given."""
    with plt.rc_context(STYLE):
        steps = [int(s) for s, _ in rows if s != "avg"]
        fig, ax = plt.subplots(figsize=(5.0, 3.0))
        ax.plot(steps, [m.mae for s, m in rows if s != "avg"], "o-", ms=3, label="MAE")
        ax.plot(steps, [m.rmse for s, m in rows if s != "avg"], "s-", ms=3, label="RMSE")
        if baseline is not None:
            ax.plot(steps, [m.mae for s, m in baseline if s != "avg"], "--", color="0.5", label="persistence MAE")
        ax.set_xlabel("horizon step")
        ax.set_ylabel("error (data units)")
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_selections(routing_log: list[dict], names: list[str], path) -> Path:
    """Per-epoch hard-selection counts for each expert."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 3.0))
        epochs = [e["epoch"] for e in routing_log]
        for i, name in enumerate(names):
            ax.plot(epochs, [e["selections"][i] for e in routing_log], label=name)
        ax.set_xlabel("epoch")
        ax.xaxis.set_major_locator(MaxNLocator(integer=True))
        ax.set_ylabel("samples routed")
        ax.legend(frameon=False)
        return _save(fig, path)
