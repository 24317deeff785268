"""Matplotlib settings and figure renderers for run outputs and reports.

Everything renders off-screen and is saved without timestamps or random
SVG ids, so regenerating a figure from the same data gives the same bytes.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib import colors as mcolors  # noqa: E402

STYLE = {
    "font.size": 8,
    "axes.titlesize": 8,
    "axes.labelsize": 8,
    "xtick.labelsize": 7,
    "ytick.labelsize": 7,
    "legend.fontsize": 7,
    "figure.dpi": 100,
    "savefig.dpi": 100,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "svg.hashsalt": "perturbscope",
    "svg.fonttype": "none",
    "path.simplify": False,
}

_METADATA = {
    "png": {"Software": None},
    "svg": {"Date": None, "Creator": None},
    "pdf": {"CreationDate": None, "ModDate": None, "Producer": None, "Creator": None},
}

LABEL_MARKERS = ("o", "s", "^", "D", "v", "P", "X", "*")


def style():
    """Context manager applying the package rcParams."""
    return plt.rc_context(STYLE)


def save_figure(fig, path) -> None:
    path = os.fspath(path)
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    fmt = os.path.splitext(path)[1].lstrip(".").lower()
    # svg ids are salted from rcParams at save time, not at draw time
    with style():
        fig.savefig(path, format=fmt, metadata=_METADATA.get(fmt))
    plt.close(fig)


def signed_rgb(plane: np.ndarray, cmap: str = "bwr") -> np.ndarray:
    """8-bit RGB rendering of a signed plane; blue negative, red positive."""
    plane = np.asarray(plane, dtype=np.float64)
    lim = float(np.abs(plane).max()) or 1.0
    norm = mcolors.Normalize(vmin=-lim, vmax=lim)
    rgba = matplotlib.colormaps[cmap](norm(plane))
    return np.floor(rgba[..., :3] * 255.0 + 0.5).astype(np.uint8)


def scaled_gray(plane: np.ndarray) -> np.ndarray:
    """8-bit grayscale rendering, min-max scaled."""
    plane = np.asarray(plane, dtype=np.float64)
    lo, hi = float(plane.min()), float(plane.max())
    if hi == lo:
        return np.zeros(plane.shape, dtype=np.uint8)
    return np.floor((plane - lo) / (hi - lo) * 255.0 + 0.5).astype(np.uint8)


def pair_panel(title, sensitivity, mag_clean, mag_perturbed, delta, radii, prof_clean, prof_perturbed):
    """One row of panels for a pair: sensitivity, spectra, signed difference, profiles."""
    with style():
        fig, axes = plt.subplots(1, 5, figsize=(12.5, 2.6))
        axes[0].imshow(sensitivity, cmap="inferno", vmin=0, vmax=max(float(np.max(sensitivity)), 1e-12))
        axes[0].set_title("occlusion sensitivity")
        vmax = float(max(mag_clean.max(), mag_perturbed.max()))
        axes[1].imshow(mag_clean, cmap="gray", vmin=0, vmax=vmax)
        axes[1].set_title("log|F| clean")
        axes[2].imshow(mag_perturbed, cmap="gray", vmin=0, vmax=vmax)
        axes[2].set_title("log|F| perturbed")
        lim = float(np.abs(delta).max()) or 1.0
        im = axes[3].imshow(delta, cmap="bwr", vmin=-lim, vmax=lim)
        axes[3].set_title("signed difference")
        fig.colorbar(im, ax=axes[3], fraction=0.046, pad=0.04)
        for ax in axes[:4]:
            ax.set_xticks([])
            ax.set_yticks([])
        axes[4].plot(radii, prof_clean, color="0.2", lw=1, label="clean")
        axes[4].plot(radii, prof_perturbed, color="tab:red", lw=1, label="perturbed")
        axes[4].set_xlabel("radius (frequency bins)")
        axes[4].set_ylabel("mean log-magnitude")
        axes[4].legend(frameon=False)
        fig.suptitle(title)
        fig.tight_layout()
    return fig


def heatmap(plane, title="", cmap="inferno", signed=False):
    with style():
        fig, ax = plt.subplots(figsize=(3.2, 3.0))
        if signed:
            lim = float(np.abs(plane).max()) or 1.0
            im = ax.imshow(plane, cmap="bwr", vmin=-lim, vmax=lim)
        else:
            im = ax.imshow(plane, cmap=cmap)
        ax.set_xticks([])
        ax.set_yticks([])
        ax.set_title(title)
        fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
        fig.tight_layout()
    return fig


def embedding_scatter(points, labels, bases, title="fingerprint PCA"):
    """Scatter keyed by protection label (marker) and base image (colour)."""
    with style():
        fig, ax = plt.subplots(figsize=(4.5, 3.6))
        label_order = list(dict.fromkeys(labels))
        base_order = list(dict.fromkeys(bases))
        palette = matplotlib.colormaps["tab10"]
        labels = np.asarray(labels)
        bases = np.asarray(bases)
        for li, lab in enumerate(label_order):
            for bi, base in enumerate(base_order):
                sel = (labels == lab) & (bases == base)
                if not sel.any():
                    continue
                ax.scatter(points[sel, 0], points[sel, 1], s=18,
                           marker=LABEL_MARKERS[li % len(LABEL_MARKERS)],
                           color=palette(bi % 10), edgecolors="none")
        for li, lab in enumerate(label_order):
            ax.scatter([], [], marker=LABEL_MARKERS[li % len(LABEL_MARKERS)], color="0.3", label=lab)
        ax.legend(frameon=False, loc="best", title="protection")
        ax.set_xlabel("PC1")
        ax.set_ylabel("PC2")
        ax.set_title(title)
        fig.tight_layout()
    return fig


def summary_bars(blocks):
    """Mean entropy and detection rate per group, one column per grouping key.

    ``blocks`` maps a group kind to a list of ``(value, mean_entropy, rate)``.
    """
    kinds = list(blocks)
    with style():
        fig, axes = plt.subplots(2, len(kinds), figsize=(3.4 * len(kinds), 4.2), squeeze=False)
        for j, kind in enumerate(kinds):
            rows = blocks[kind]
            names = [r[0] for r in rows]
            x = np.arange(len(rows))
            axes[0, j].bar(x, [r[1] for r in rows], color="tab:blue")
            axes[0, j].set_title(f"by {kind}")
            axes[0, j].set_ylabel("mean entropy (bits)")
            axes[1, j].bar(x, [r[2] for r in rows], color="tab:orange")
            axes[1, j].set_ylabel("detected (%)")
            axes[1, j].set_ylim(0, 100)
            for ax in axes[:, j]:
                ax.set_xticks(x)
                ax.set_xticklabels(names, rotation=45, ha="right")
        fig.tight_layout()
    return fig
