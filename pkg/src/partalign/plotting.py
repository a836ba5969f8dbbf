"""Figures written next to the CSV/JSON outputs."""

from __future__ import annotations

from pathlib import Path
from typing import Dict, List, Optional, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
    "savefig.bbox": "tight",
}


def new(nrows=1, ncols=1, size=(4.5, 3.2)):
    with plt.rc_context(RC):
        fig, ax = plt.subplots(nrows, ncols, figsize=size)
    return fig, ax


def save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with plt.rc_context(RC):
        fig.savefig(path)
    plt.close(fig)
    return path


def plot_cmc(curves: Dict[str, Sequence[float]], path, title: Optional[str] = None) -> Path:
    fig, ax = new()
    for label, values in curves.items():
        ranks = np.arange(1, len(values) + 1)
        ax.plot(ranks, 100 * np.asarray(values), marker="o", ms=2.5, lw=1.2, label=label)
    ax.set_xlabel("rank")
    ax.set_ylabel("matching rate (%)")
    ax.set_ylim(0, 100)
    if title:
        ax.set_title(title)
    ax.legend(loc="lower right", frameon=False)
    return save(fig, path)


def plot_loss(rows: List[dict], path, window: int = 50) -> Path:
    it = np.array([r["iteration"] for r in rows])
    loss = np.array([r["mean_loss"] for r in rows])
    active = np.array([r["active_triplets"] for r in rows])
    fig, (a1, a2) = new(2, 1, size=(4.5, 4.5))
    a1.plot(it, loss, lw=0.5, alpha=0.4, color="C0")
    if len(loss) >= window:
        smooth = np.convolve(loss, np.ones(window) / window, mode="valid")
        a1.plot(it[window - 1:], smooth, lw=1.2, color="C0")
    a1.set_ylabel("mean active-triplet loss")
    a2.plot(it, active, lw=0.6, color="C1")
    a2.set_ylabel("active triplets")
    a2.set_xlabel("iteration")
    return save(fig, path)


def plot_sweep(rows: List[dict], path, key: str = "K") -> Path:
    fig, ax = new()
    xs = [r[key] for r in rows]
    for col in ("rank1", "rank5", "rank10", "rank20"):
        if col in rows[0]:
            ax.plot(xs, [100 * r[col] for r in rows], marker="o", ms=3, label=col)
    ax.set_xlabel(key)
    ax.set_ylabel("matching rate (%)")
    ax.legend(frameon=False)
    return save(fig, path)


def plot_bench(rows: List[dict], path) -> Path:
    fig, ax = new()
    m = [r["M"] for r in rows]
    ax.plot(m, [r["ms_naive"] for r in rows], marker="o", label="per-triplet")
    ax.plot(m, [r["ms_aggregated"] for r in rows], marker="s", label="per-sample weights")
    ax.set_yscale("log")
    ax.set_xlabel("batch size M")
    ax.set_ylabel("gradient time (ms)")
    ax.legend(frameon=False)
    return save(fig, path)


def part_map_montage(images: np.ndarray, maps: np.ndarray, path,
                     names: Optional[Sequence[str]] = None) -> Path:
    """Rows: images; columns: the image then each part map."""
    n, k = len(images), maps.shape[-1]
    fig, axes = new(n, k + 1, size=(0.7 * (k + 1), 1.3 * n))
    axes = np.atleast_2d(axes)
    for i in range(n):
        axes[i, 0].imshow(np.clip(images[i], 0, 1), interpolation="nearest")
        if names:
            axes[i, 0].set_title(Path(names[i]).stem, fontsize=5)
        for j in range(k):
            axes[i, j + 1].imshow(maps[i, :, :, j], cmap="gray", vmin=0, vmax=1,
                                  interpolation="nearest")
            if i == 0:
                axes[i, j + 1].set_title(f"map {j + 1}", fontsize=6)
    for ax in axes.ravel():
        ax.set_axis_off()
    return save(fig, path)
