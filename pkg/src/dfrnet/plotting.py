"""Figures written next to the CSV outputs of ``toy-train`` and ``ablate``."""
from __future__ import annotations

import math
import os
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .toy import AblationTable, HistoryRow  # noqa: E402


def _smooth(values: np.ndarray, window: int) -> np.ndarray:
    if window <= 1 or values.size < window:
        return values
    kernel = np.ones(window) / window
    return np.convolve(values, kernel, mode="valid")


def plot_history(history: Sequence[HistoryRow], path: str | os.PathLike, window: int = 50) -> None:
    steps = np.array([h.step for h in history])
    fig, ax = plt.subplots(figsize=(7, 4))
    for key, label in (("l_app", "appearance loss"), ("l_loc", "localization loss"), ("total", "total")):
        vals = _smooth(np.array([getattr(h, key) for h in history]), window)
        ax.plot(steps[len(steps) - len(vals):], vals, label=label)
    ax.set_xlabel("step")
    ax.set_ylabel(f"loss (moving mean, {window} steps)")
    s_app = np.array([h.s_app for h in history])
    if s_app.size and not np.all(np.isnan(s_app)):
        ax2 = ax.twinx()
        ax2.plot(steps, s_app, color="tab:purple", lw=0.8, ls="--", label="s_app")
        ax2.plot(steps, [h.s_loc for h in history], color="tab:brown", lw=0.8, ls="--", label="s_loc")
        ax2.set_ylabel("trading score")
        ax2.set_ylim(0.0, 1.0)
        ax2.legend(loc="upper center", fontsize=8)
    ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_ablation(table: AblationTable, path: str | os.PathLike) -> None:
    names = [r.name for r in table.rows]
    means = [r.mean for r in table.rows]
    stds = [r.std for r in table.rows]
    fig, ax = plt.subplots(figsize=(max(4.0, 0.9 * len(names) + 2), 4))
    x = np.arange(len(names))
    ax.bar(x, means, yerr=stds, capsize=4, color="tab:blue", alpha=0.8)
    for i, r in enumerate(table.rows):
        ax.scatter(np.full(len(r.per_seed), i), r.per_seed, color="k", s=10, zorder=3)
    ax.set_xticks(x, names, rotation=30 if max(map(len, names)) > 6 else 0)
    ax.set_ylabel(table.metric)
    top = max([m + s for m, s in zip(means, stds)] + [v for r in table.rows for v in r.per_seed] + [1e-3])
    ax.set_ylim(0.0, min(1.0, 1.15 * top) if math.isfinite(top) else 1.0)
    ax.set_title(f"seeds {','.join(map(str, table.seeds))}")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
