"""Report figures written to PNG files (headless Agg backend)."""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .superpixel import segment_boundaries  # noqa: E402

# no software/date stamps, so identical inputs give identical files
_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)
    return path


def loss_curve(trace: Sequence[Mapping[str, float]], path) -> Path:
    steps = [r["step"] for r in trace]
    fig, (ax, ax2) = plt.subplots(1, 2, figsize=(9, 3.2))
    for key, style in (("loss_total", "-"), ("loss_f2e", "--"), ("loss_t2e", ":")):
        ax.plot(steps, [r[key] for r in trace], style, label=key)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(frameon=False)
    ax2.plot(steps, [r["pos_sim"] for r in trace], label="positive")
    ax2.plot(steps, [r["neg_sim"] for r in trace], label="negative")
    ax2.set_xlabel("step")
    ax2.set_ylabel("mean cosine")
    ax2.legend(frameon=False)
    fig.tight_layout()
    return _save(fig, path)


def iou_bars(iou: np.ndarray, names: Sequence[str], path, title: str = "") -> Path:
    vals = np.nan_to_num(np.asarray(iou, dtype=float), nan=0.0)
    fig, ax = plt.subplots(figsize=(max(3.0, 0.7 * len(vals) + 1.5), 3.2))
    ax.bar(range(len(vals)), vals, color="tab:blue")
    ax.set_xticks(range(len(vals)), names, rotation=30, ha="right")
    ax.set_ylim(0, 1)
    ax.set_ylabel("IoU")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    return _save(fig, path)


def budget_curve(budgets: Sequence[float], series: Mapping[str, Sequence[float]], path) -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    x = [100 * b for b in budgets]
    for name, ys in series.items():
        ax.plot(x, ys, marker="o", label=name)
    ax.set_xscale("log")
    ax.set_xticks(x, [f"{v:g}%" for v in x])
    ax.set_xlabel("annotation budget")
    ax.set_ylabel("mIoU")
    ax.set_ylim(0, 1)
    ax.legend(frameon=False)
    fig.tight_layout()
    return _save(fig, path)


def attention_panel(maps: Mapping[str, np.ndarray], path, frame: np.ndarray | None = None) -> Path:
    n = len(maps) + (frame is not None)
    fig, axes = plt.subplots(1, n, figsize=(2.6 * n, 2.8), squeeze=False)
    axes = axes[0]
    i = 0
    if frame is not None:
        axes[0].imshow(frame, cmap="gray")
        axes[0].set_title("frame")
        i = 1
    for ax, (name, sim) in zip(axes[i:], maps.items()):
        im = ax.imshow(sim, cmap="magma", vmin=-1, vmax=1)
        ax.set_title(name)
        fig.colorbar(im, ax=ax, fraction=0.046)
    for ax in axes:
        ax.set_axis_off()
    fig.tight_layout()
    return _save(fig, path)


def superpixel_overlay(frame: np.ndarray, labels: np.ndarray, path) -> Path:
    rgb = np.repeat((np.asarray(frame, dtype=float) / 255.0)[..., None], 3, axis=2).clip(0, 1)
    rgb[segment_boundaries(labels)] = (1.0, 0.2, 0.1)
    fig, ax = plt.subplots(figsize=(3.2, 3.2))
    ax.imshow(rgb, interpolation="nearest")
    ax.set_axis_off()
    fig.tight_layout()
    return _save(fig, path)


def prediction_panel(frame: np.ndarray | None, gt: np.ndarray | None, pred: np.ndarray,
                     num_classes: int, path) -> Path:
    panels = [("frame", frame, "gray"), ("ground truth", gt, "tab10"), ("prediction", pred, "tab10")]
    panels = [p for p in panels if p[1] is not None]
    fig, axes = plt.subplots(1, len(panels), figsize=(2.6 * len(panels), 2.8), squeeze=False)
    for ax, (title, img, cmap) in zip(axes[0], panels):
        kw = {} if cmap == "gray" else {"vmin": 0, "vmax": 9}
        ax.imshow(np.where(img == 255, np.nan, img) if cmap != "gray" else img,
                  cmap=cmap, interpolation="nearest", **kw)
        ax.set_title(title)
        ax.set_axis_off()
    fig.tight_layout()
    return _save(fig, path)
