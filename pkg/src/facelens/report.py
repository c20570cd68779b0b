"""Figure rendering for the report path: evaluation curves and montage
grids, written as PNG files next to the CSV output. PNG metadata is
stripped so repeated runs are byte-identical."""

from __future__ import annotations

from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

# suppress the mtime-dependent Software/date chunks for reproducible bytes
_PNG_METADATA = {"Software": None}


def plot_curves(curves, path, title="region-swap game"):
    """curves: dict method name -> EvalCurve; plots macro flip rate
    against pooled pixel FPR."""
    fig, ax = plt.subplots(figsize=(6, 4.5))
    for name in sorted(curves):
        curve = curves[name]
        order = np.argsort(curve.fpr, kind="stable")
        ax.plot(curve.fpr[order], curve.macro_rate[order], label=name)
    ax.set_xlabel("pixel false positive rate")
    ax.set_ylabel("mean nonmate classification rate (macro)")
    ax.set_xscale("symlog", linthresh=1e-3)
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.grid(True, alpha=0.3)
    ax.legend(loc="lower right", fontsize=8)
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_PNG_METADATA)
    plt.close(fig)


def saliency_overlay(image_chw, saliency_values):
    """Probe image with the saliency map blended in as a red heat layer."""
    img = np.asarray(image_chw).transpose(1, 2, 0).astype(np.float64)
    heat = np.clip(np.asarray(saliency_values), 0.0, 1.0)
    overlay = img.copy()
    overlay[..., 0] = np.clip(img[..., 0] * (1 - heat) + heat, 0, 1)
    overlay[..., 1] = img[..., 1] * (1 - 0.7 * heat)
    overlay[..., 2] = img[..., 2] * (1 - 0.7 * heat)
    return overlay


def montage(cells, path, n_cols=8, cell_titles=None):
    """Grid of image cells (HWC float arrays in [0, 1])."""
    n = len(cells)
    n_cols = min(n_cols, max(n, 1))
    n_rows = (n + n_cols - 1) // n_cols
    fig, axes = plt.subplots(n_rows, n_cols,
                             figsize=(1.2 * n_cols, 1.3 * n_rows), squeeze=False)
    for i in range(n_rows * n_cols):
        ax = axes[i // n_cols][i % n_cols]
        ax.axis("off")
        if i < n:
            ax.imshow(np.clip(cells[i], 0, 1))
            if cell_titles:
                ax.set_title(cell_titles[i], fontsize=5)
    fig.tight_layout(pad=0.2)
    fig.savefig(path, dpi=120, metadata=_PNG_METADATA)
    plt.close(fig)
