"""Figures written next to the CLI reports. Uses the non-interactive Agg backend."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_STYLE = {
    "figure.dpi": 100,
    "savefig.dpi": 100,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.tight_layout()
    # no Software tag so reruns write identical bytes
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_series(series: Sequence, path: str | Path, limit: int = 4) -> Path:
    with plt.rc_context(_STYLE):
        n = max(min(limit, len(series)), 1)
        fig, axes = plt.subplots(n, 1, figsize=(7, 1.8 * n), squeeze=False)
        for ax, s in zip(axes[:, 0], series):
            obs = s.observed
            ax.plot(s.times[obs], s.values[obs], ".-", ms=3, lw=0.8)
            ax.set_title(s.key, loc="left", fontsize=8)
        axes[-1, 0].set_xlabel("time")
        return _save(fig, path)


def plot_forecasts(items: Sequence[tuple], path: str | Path, limit: int = 4) -> Path:
    """``items`` are ``(label, ctx_t, ctx_x, hor_t, pred, true_or_None)`` tuples."""
    items = list(items)[:limit]
    with plt.rc_context(_STYLE):
        fig, axes = plt.subplots(max(len(items), 1), 1, figsize=(7, 1.9 * max(len(items), 1)),
                                 squeeze=False)
        for ax, (label, ct, cx, ht, pred, truth) in zip(axes[:, 0], items):
            ax.plot(ct, cx, ".-", ms=3, lw=0.8, color="0.35", label="context")
            if truth is not None:
                ax.plot(ht, truth, ".", ms=4, color="tab:green", label="actual")
            ax.plot(ht, pred, "-", lw=1.4, color="tab:red", label="forecast")
            ax.axvline(ht[0], color="0.6", lw=0.6, ls="--")
            ax.set_title(label, loc="left", fontsize=8)
        axes[0, 0].legend(loc="upper left", fontsize=7, frameon=False, ncol=3)
        axes[-1, 0].set_xlabel("time")
        return _save(fig, path)


def plot_history(history: Sequence[dict], path: str | Path) -> Path:
    epochs = [h["epoch"] for h in history]
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.plot(epochs, [h["train_loss"] for h in history], "o-", ms=3, label="train loss")
        ax.plot(epochs, [h["val_mse"] for h in history], "s-", ms=3, label="val MSE")
        ax.set_xlabel("epoch")
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_ablation(rows: Sequence, path: str | Path) -> Path:
    names = [r.variant for r in rows]
    deltas = np.array([r.delta_pct for r in rows])
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(6, 0.5 * len(rows) + 1.2))
        colors = ["tab:red" if d > 0 else "tab:blue" for d in deltas]
        ax.barh(names, deltas, color=colors)
        ax.axvline(0, color="k", lw=0.8)
        ax.set_xlabel("MSE change vs base (%)")
        ax.invert_yaxis()
        return _save(fig, path)


def plot_few_shot(ks: Sequence[int], mses: Sequence[float], path: str | Path,
                  reference: float | None = None) -> Path:
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(5, 3))
        shown = [max(k, 1) for k in ks]
        ax.plot(shown, mses, "o-", ms=4, label="fine-tuned")
        if reference is not None:
            ax.axhline(reference, color="0.5", ls="--", lw=0.8, label="mean baseline")
        ax.set_xscale("log")
        ax.set_xlabel("training series k")
        ax.set_ylabel("test MSE")
        ax.legend(frameon=False)
        return _save(fig, path)
