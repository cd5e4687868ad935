"""Orthogonal mid-slice renders for quick visual inspection."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

DEFAULT_CMAP = "RdBu_r"


def mid_slices(data: np.ndarray, index=None):
    """Sagittal, coronal and axial slices through ``index`` (default centre)."""
    if index is None:
        index = tuple(d // 2 for d in data.shape)
    i, j, k = index
    return data[i, :, :], data[:, j, :], data[:, :, k]


def _robust_limits(data):
    finite = data[np.isfinite(data)]
    if finite.size == 0:
        return 0.0, 1.0
    lo, hi = np.percentile(finite, [1, 99])
    if lo == hi:
        hi = lo + 1.0
    return float(lo), float(hi)


def render_orthogonal(vol, path, title=None, cmap=DEFAULT_CMAP, index=None, dpi=100):
    """Write a PNG with the three mid-slices of ``vol`` side by side."""
    data = np.asarray(vol.data, dtype=np.float64)
    vmin, vmax = _robust_limits(data)
    fig, axes = plt.subplots(1, 3, figsize=(10, 3.6))
    for ax, sl, name in zip(axes, mid_slices(data, index), ("sagittal", "coronal", "axial")):
        im = ax.imshow(sl.T, origin="lower", cmap=cmap, vmin=vmin, vmax=vmax)
        ax.set_title(name, fontsize=9)
        ax.set_xticks([])
        ax.set_yticks([])
    fig.colorbar(im, ax=axes, shrink=0.8)
    if title:
        fig.suptitle(title)
    fig.savefig(path, dpi=dpi)
    plt.close(fig)
    return path


def render_comparison(ppm, reference, path, fwhm=None, cmap=DEFAULT_CMAP, dpi=100):
    """Two rows of mid-slices: PPM on top, reference below, each on its own scale."""
    fig, axes = plt.subplots(2, 3, figsize=(10, 6.5))
    for row, (vol, label) in enumerate(((ppm, "PPM"), (reference, "reference"))):
        data = np.asarray(vol.data, dtype=np.float64)
        vmin, vmax = _robust_limits(data)
        for ax, sl, name in zip(axes[row], mid_slices(data), ("sagittal", "coronal", "axial")):
            im = ax.imshow(sl.T, origin="lower", cmap=cmap, vmin=vmin, vmax=vmax)
            ax.set_xticks([])
            ax.set_yticks([])
            if row == 0:
                ax.set_title(name, fontsize=9)
        axes[row, 0].set_ylabel(label)
        fig.colorbar(im, ax=list(axes[row]), shrink=0.8)
    if fwhm:
        fig.suptitle(f"smoothed, FWHM {fwhm:g} voxels")
    fig.savefig(path, dpi=dpi)
    plt.close(fig)
    return path
