"""Figures for training curves and per-class AP."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
}


def fig_size(scale: float = 1.0, width_in: float = 5.5) -> tuple[float, float]:
    golden = (np.sqrt(5.0) - 1.0) / 2.0
    return width_in * scale, width_in * scale * golden


def _smooth(y: np.ndarray, window: int) -> np.ndarray:
    if len(y) < window or window < 2:
        return y
    return np.convolve(y, np.ones(window) / window, mode="valid")


def plot_curves(curves: dict[str, tuple[np.ndarray, np.ndarray]], path, ylabel: str, smooth: int = 1,
                logy: bool = False) -> Path:
    """One line per named (x, y) series."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=fig_size())
        for name, (x, y) in curves.items():
            ys = _smooth(np.asarray(y, dtype=float), smooth)
            ax.plot(np.asarray(x)[len(x) - len(ys):], ys, label=name, lw=1.2)
        ax.set_xlabel("iteration")
        ax.set_ylabel(ylabel)
        if logy:
            ax.set_yscale("log")
        if len(curves) > 1:
            ax.legend(frameon=False)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def plot_ap_bars(reports: dict[str, np.ndarray], class_names: Sequence[str], path) -> Path:
    """Grouped bars of per-class AP, one group per class and one bar per report."""
    n = len(reports)
    width = 0.8 / max(n, 1)
    x = np.arange(len(class_names))
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=fig_size())
        for i, (name, ap) in enumerate(reports.items()):
            ax.bar(x + (i - (n - 1) / 2) * width, np.nan_to_num(ap), width, label=name)
        ax.set_xticks(x)
        ax.set_xticklabels(class_names)
        ax.set_ylim(0, 1)
        ax.set_ylabel("AP@0.5")
        if n > 1:
            ax.legend(frameon=False, ncol=min(n, 3))
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return Path(path)
