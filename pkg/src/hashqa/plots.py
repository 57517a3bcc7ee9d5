"""Figures written next to the CSV reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 3.8),
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 10,
    "legend.frameon": False,
    "savefig.dpi": 120,
}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_history(history: list[dict], path: str | Path) -> Path:
    """Training loss and dev metrics per epoch."""
    epochs = [h["epoch"] for h in history]
    with plt.rc_context(STYLE):
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9.0, 3.6))
        ax1.plot(epochs, [h["train_loss"] for h in history], marker="o", ms=3)
        ax1.set_xlabel("epoch")
        ax1.set_ylabel("train loss / triplet")
        ax2.plot(epochs, [h["dev_P@1"] for h in history], marker="o", ms=3, label="dev P@1")
        ax2.plot(epochs, [h["dev_MRR"] for h in history], marker="s", ms=3, label="dev MRR")
        ax2.plot(epochs, [h["mean_abs_B"] for h in history], ls="--", label="mean |B|")
        ax2.set_xlabel("epoch")
        ax2.set_ylim(0, 1.02)
        ax2.legend(loc="lower right")
        return _save(fig, path)


def plot_sensitivity(rows: list[dict], path: str | Path) -> Path:
    """Dev P@1 against beta (one line per delta) and a beta x delta heatmap."""
    betas = sorted({r["beta"] for r in rows})
    deltas = sorted({r["delta"] for r in rows})
    grid = np.full((len(deltas), len(betas)), np.nan)
    for r in rows:
        grid[deltas.index(r["delta"]), betas.index(r["beta"])] = r["dev_P@1"]
    with plt.rc_context(STYLE):
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10.0, 3.8))
        for i, d in enumerate(deltas):
            ax1.plot(range(len(betas)), grid[i], marker="o", ms=3, label=f"delta={d:g}")
        ax1.set_xticks(range(len(betas)), [f"{b:g}" for b in betas])
        ax1.set_xlabel("beta")
        ax1.set_ylabel("dev P@1")
        ax1.legend(fontsize=8)
        im = ax2.imshow(grid, cmap="viridis", vmin=0, vmax=1, aspect="auto", origin="lower")
        ax2.set_xticks(range(len(betas)), [f"{b:g}" for b in betas])
        ax2.set_yticks(range(len(deltas)), [f"{d:g}" for d in deltas])
        ax2.set_xlabel("beta")
        ax2.set_ylabel("delta")
        ax2.grid(False)
        for (i, j), v in np.ndenumerate(grid):
            if np.isfinite(v):
                ax2.text(j, i, f"{v:.2f}", ha="center", va="center", fontsize=7, color="w" if v < 0.6 else "k")
        fig.colorbar(im, ax=ax2, label="dev P@1")
        return _save(fig, path)


def plot_bench(reports: list[dict], path: str | Path) -> Path:
    """Per-question latency and representation memory by serving mode."""
    modes = [r["mode"] for r in reports]
    with plt.rc_context(STYLE):
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9.0, 3.4))
        ax1.bar(modes, [r["seconds_per_question"] * 1e3 for r in reports], color="C0")
        ax1.set_ylabel("ms / question")
        ax2.bar(modes, [r["memory_bytes"] / 1024**2 for r in reports], color="C1")
        ax2.set_ylabel("answer memory (MiB)")
        for ax in (ax1, ax2):
            ax.tick_params(axis="x", labelrotation=15)
        return _save(fig, path)
