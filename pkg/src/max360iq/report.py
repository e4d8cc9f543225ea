"""Figure rendering for the CLI report paths (matplotlib, Agg backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import logistic5  # noqa: E402

_COLORS = {"Good5s": "tab:green", "Bad5s": "tab:red",
           "Good15s": "tab:olive", "Bad15s": "tab:orange", "": "tab:blue"}


def _atomic_save(fig, path: Path) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    # the format must be explicit: the temp name ends in .tmp
    fig.savefig(tmp, dpi=120, bbox_inches="tight",
                format=path.suffix.lstrip(".") or "png")
    tmp.rename(path)
    plt.close(fig)


def render_scatter(rows: list[dict], theta, path: str | Path) -> None:
    """Predictions vs MOS, per-condition colors, with the fitted mapping."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(5, 4))
    for cond in sorted({r["condition"] for r in rows}):
        xs = [r["pred"] for r in rows if r["condition"] == cond]
        ys = [r["mos"] for r in rows if r["condition"] == cond]
        ax.scatter(xs, ys, s=14, alpha=0.7, label=cond or "all",
                   color=_COLORS.get(cond))
    preds = np.array([r["pred"] for r in rows])
    grid = np.linspace(preds.min(), preds.max(), 200)
    ax.plot(grid, logistic5(grid, np.asarray(theta)), "k--", lw=1,
            label="fitted mapping")
    ax.set_xlabel("predicted score")
    ax.set_ylabel("MOS")
    ax.legend(fontsize=7)
    fig.tight_layout()
    _atomic_save(fig, path)


def render_sweep(ks: list[int], plccs: list[float], srccs: list[float],
                 path: str | Path) -> None:
    """Metric curves over the viewport-count sweep."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(ks, plccs, "o-", label="PLCC")
    ax.plot(ks, srccs, "s-", label="SRCC")
    ax.set_xlabel("viewports per sequence (K)")
    ax.set_ylabel("correlation")
    ax.set_xticks(ks)
    ax.legend()
    fig.tight_layout()
    _atomic_save(fig, path)


def render_training_log(log: list[dict], path: str | Path) -> None:
    """Loss and validation SRCC per epoch."""
    path = Path(path)
    epochs = [r["epoch"] for r in log]
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(epochs, [r["loss"] for r in log], "o-", label="train loss")
    if any(r.get("val_srcc") is not None for r in log):
        ax2 = ax.twinx()
        ax2.plot(epochs, [r.get("val_srcc") for r in log], "s--",
                 color="tab:orange", label="val SRCC")
        ax2.set_ylabel("val SRCC")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    fig.tight_layout()
    _atomic_save(fig, path)
