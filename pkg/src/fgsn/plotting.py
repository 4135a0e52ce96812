"""Matplotlib figures for the evaluate report, written as PNG files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed metadata keeps repeated renders byte-identical
_PNG_METADATA = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, format="png", dpi=100, metadata=_PNG_METADATA)
    plt.close(fig)
    return path


def plot_cdfs(curves: dict, path, xlabel: str, title: str = "") -> Path:
    """Step plot of empirical CDFs, one line per series."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name, curve in curves.items():
        if not curve:
            continue
        x, y = zip(*curve)
        ax.step([x[0]] + list(x), [0.0] + list(y), where="post", label=name)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("fraction of queries")
    ax.set_ylim(0, 1.02)
    ax.grid(alpha=0.3)
    if title:
        ax.set_title(title)
    if curves:
        ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def plot_contingency(table: np.ndarray, path, title: str = "") -> Path:
    """Heatmap of a class-by-cluster table, each row normalised to sum 1."""
    table = np.asarray(table, dtype=np.float64)
    rows = table.sum(axis=1, keepdims=True)
    norm = np.divide(table, rows, out=np.zeros_like(table), where=rows > 0)
    fig, ax = plt.subplots(figsize=(max(4, 0.25 * table.shape[1] + 2), max(3, 0.25 * table.shape[0] + 1.5)))
    im = ax.imshow(norm, aspect="auto", cmap="viridis", vmin=0, vmax=1, interpolation="nearest")
    ax.set_xlabel("cluster index")
    ax.set_ylabel("class")
    if title:
        ax.set_title(title)
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    return _save(fig, path)
