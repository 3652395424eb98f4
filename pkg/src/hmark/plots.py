"""File-based plot emission for reports (static images, no UI)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt


def roc_plot(points, auc: float, path) -> None:
    pts = list(points)
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    ax.plot([p[0] for p in pts], [p[1] for p in pts], marker=".", lw=1.5)
    ax.plot([0, 1], [0, 1], ls="--", c="gray", lw=0.8)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_title(f"ROC (AUC = {auc:.3f})")
    fig.tight_layout()
    fig.savefig(Path(path), dpi=120)
    plt.close(fig)


def trend_plot(rows: list[dict], path, x_key: str = "step",
               y_keys: tuple[str, ...] = ("auc", "acc_wm", "acc_bit")) -> None:
    fig, ax = plt.subplots(figsize=(5.5, 4))
    xs = [r[x_key] for r in rows]
    for key in y_keys:
        if any(key in r for r in rows):
            ax.plot(xs, [r.get(key) for r in rows], marker="o", label=key)
    ax.set_xlabel(x_key)
    ax.set_ylim(0, 1.05)
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(Path(path), dpi=120)
    plt.close(fig)


def sweep_plot(values, series: dict[str, list], axis_name: str, path) -> None:
    fig, ax = plt.subplots(figsize=(5.5, 4))
    for name, ys in series.items():
        ax.plot(values, ys, marker="o", label=name)
    ax.set_xlabel(axis_name)
    ax.set_ylim(0, 1.05)
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(Path(path), dpi=120)
    plt.close(fig)
