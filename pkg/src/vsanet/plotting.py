"""Figures for the CLI report paths.

Only the object API is used (no pyplot), so nothing depends on the global backend.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np
import torch
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure
from PIL import Image

LOSS_KEYS = {
    "svae": ("l_rec", "l_kl", "l_svae"),
    "translation": ("l_content", "l_style", "l_id", "l_adv", "l_d", "l_total"),
}


def _hwc(img: torch.Tensor) -> np.ndarray:
    return img.detach().clamp(0, 1).permute(1, 2, 0).cpu().numpy()


def save_image(img: torch.Tensor, path: str | os.PathLike) -> Path:
    """Write a [3,H,W] tensor in [0,1] as an 8-bit PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.round(_hwc(img) * 255).astype(np.uint8)
    Image.fromarray(arr).save(path)
    return path


def _save(fig: Figure, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    FigureCanvasAgg(fig)
    fig.savefig(path, dpi=100, metadata={"Software": None})
    return path


def translation_grid(nir: torch.Tensor, exemplars: torch.Tensor | None, outputs: torch.Tensor,
                     path: str | os.PathLike) -> Path:
    """Exemplars across the top, NIR inputs down the left, ``outputs[i, j]`` in the body.

    ``outputs`` has shape [N, M, 3, H, W] for N inputs and M exemplars. Without exemplars
    (prior mode) the header row is dropped.
    """
    n, m = outputs.shape[:2]
    top = 0 if exemplars is None else 1
    fig = Figure(figsize=(1.4 * (m + 1), 1.4 * (n + top)))
    axes = fig.subplots(n + top, m + 1, squeeze=False)
    for ax in axes.flat:
        ax.set_axis_off()
    if exemplars is not None:
        for j in range(m):
            axes[0, j + 1].imshow(_hwc(exemplars[j]))
            axes[0, j + 1].set_title(f"exemplar {j}", fontsize=8)
    for i in range(n):
        axes[i + top, 0].imshow(_hwc(nir[i]))
        axes[i + top, 0].set_title(f"NIR {i}", fontsize=8)
        for j in range(m):
            axes[i + top, j + 1].imshow(_hwc(outputs[i, j]))
            if exemplars is None:
                axes[i + top, j + 1].set_title("prior", fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def loss_curves(log: list[dict], path: str | os.PathLike, keys=None) -> Path:
    if keys is None:
        keys = LOSS_KEYS["translation" if log and "l_total" in log[0] else "svae"]
    fig = Figure(figsize=(6, 1.8 * len(keys)))
    axes = fig.subplots(len(keys), 1, sharex=True, squeeze=False)[:, 0]
    its = [r["iteration"] for r in log]
    for ax, key in zip(axes, keys):
        vals = [np.nan if r.get(key) is None else r[key] for r in log]
        ax.plot(its, vals, lw=0.8)
        ax.set_ylabel(key, fontsize=8)
    axes[-1].set_xlabel("iteration")
    fig.tight_layout()
    return _save(fig, path)


def score_histogram(genuine: np.ndarray, impostor: np.ndarray, path: str | os.PathLike,
                    title: str = "", threshold: float | None = None) -> Path:
    fig = Figure(figsize=(5, 3.2))
    ax = fig.subplots()
    bins = np.linspace(min(genuine.min(), impostor.min()), max(genuine.max(), impostor.max()), 40)
    ax.hist(impostor, bins=bins, density=True, alpha=0.6, label=f"impostor (n={impostor.size})")
    ax.hist(genuine, bins=bins, density=True, alpha=0.6, label=f"genuine (n={genuine.size})")
    if threshold is not None and np.isfinite(threshold):
        ax.axvline(threshold, color="k", ls="--", lw=0.8, label="FAR 1e-2 threshold")
    ax.set_xlabel("cosine score")
    ax.set_title(title, fontsize=9)
    ax.legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, path)
