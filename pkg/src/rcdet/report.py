"""Artifact writers: delimited tables plus rendered figures.

Every table cell goes through repr() for floats so identical runs give
byte-identical files; figures are drawn with the Agg backend next to the
table they visualize.
"""

from __future__ import annotations

import os
from typing import Optional, Sequence

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(_cell(v) for v in row) + "\n")


def _level_names(k: int) -> list[str]:
    return [f"p{3 + i}" for i in range(k)]


def trajectory_table(trajectory) -> tuple[list[str], list[list]]:
    k = len(trajectory[0].interference) if trajectory else 0
    header = (["epoch", "loss_total", "loss_cls", "loss_box", "ap50", "ap_small"]
              + [f"interf_{n}" for n in _level_names(k)])
    rows = [[r.epoch, r.loss_total, r.loss_cls, r.loss_box, r.ap50, r.ap_small,
             *r.interference] for r in trajectory]
    return header, rows


def write_trajectory(dirpath, trajectory, stem: str = "trajectory") -> None:
    header, rows = trajectory_table(trajectory)
    write_csv(os.path.join(dirpath, stem + ".csv"), header, rows)
    if trajectory:
        trajectory_figure(trajectory, os.path.join(dirpath, stem + ".png"))


def write_ap(path, report) -> None:
    write_csv(path, ["ap50", "ap_small", "ap_medium", "ap_large"],
              [[report.ap50, report.ap_small, report.ap_medium, report.ap_large]])


def write_interference(dirpath, per_image: Sequence[Sequence[float]],
                       stem: str = "interference") -> None:
    k = len(per_image[0]) if per_image else 0
    names = _level_names(k)
    header = ["image"] + [f"interf_{n}" for n in names]
    rows = [[i, *vals] for i, vals in enumerate(per_image)]
    if per_image:
        mean = np.asarray(per_image, dtype=np.float64).mean(axis=0)
        rows.append(["mean", *(float(v) for v in mean)])
    write_csv(os.path.join(dirpath, stem + ".csv"), header, rows)
    if per_image:
        interference_figure(per_image, os.path.join(dirpath, stem + ".png"))


# --- figures ---------------------------------------------------------------

def trajectory_figure(trajectory, path) -> None:
    epochs = [r.epoch for r in trajectory]
    k = len(trajectory[0].interference)
    fig, axes = plt.subplots(3, 1, figsize=(6, 8), sharex=True)
    axes[0].plot(epochs, [r.loss_total for r in trajectory], label="total")
    axes[0].plot(epochs, [r.loss_cls for r in trajectory], label="cls")
    axes[0].plot(epochs, [r.loss_box for r in trajectory], label="box")
    axes[0].set_ylabel("loss")
    axes[0].legend(fontsize=8)
    axes[1].plot(epochs, [r.ap50 for r in trajectory], label="ap50")
    axes[1].plot(epochs, [r.ap_small for r in trajectory], label="ap_small")
    axes[1].set_ylabel("AP")
    axes[1].set_ylim(-0.02, 1.02)
    axes[1].legend(fontsize=8)
    for l, name in enumerate(_level_names(k)):
        axes[2].plot(epochs, [r.interference[l] for r in trajectory], label=name)
    axes[2].set_ylabel("saliency energy")
    axes[2].set_xlabel("epoch")
    axes[2].legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def saliency_figure(image: np.ndarray, maps: Sequence[np.ndarray], path,
                    annots=None) -> None:
    """Input image next to its per-level saliency maps."""
    cols = 1 + len(maps)
    fig, axes = plt.subplots(1, cols, figsize=(2.4 * cols, 2.8))
    axes = np.atleast_1d(axes)
    img = np.asarray(image)
    axes[0].imshow(img[0] if img.ndim == 3 else img, cmap="gray")
    axes[0].set_title("input", fontsize=9)
    if annots:
        for a in annots:
            axes[0].add_patch(plt.Rectangle((a.x, a.y), a.w, a.h,
                                            fill=False, edgecolor="lime", lw=0.8))
    for ax, m, name in zip(axes[1:], maps, _level_names(len(maps))):
        ax.imshow(m, cmap="jet", vmin=0.0, vmax=1.0)
        ax.set_title(name, fontsize=9)
    for ax in axes:
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def interference_figure(per_image: Sequence[Sequence[float]], path) -> None:
    arr = np.asarray(per_image, dtype=np.float64)
    names = _level_names(arr.shape[1])
    fig, ax = plt.subplots(figsize=(5, 3))
    for l, name in enumerate(names):
        ax.plot(arr[:, l], marker=".", lw=0.8, label=name)
    ax.set_xlabel("image")
    ax.set_ylabel("saliency energy")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def grad_report_text(rep) -> str:
    lines = [
        f"parameter: {rep.param}",
        f"split residual (max abs): {rep.residual!r}",
        f"grad norm full: {rep.norm_full!r}",
        f"grad norm native path: {rep.norm_own!r}",
        f"grad norm connection-added path: {rep.norm_added!r}",
        f"grad norm without connection: {rep.norm_baseline!r}",
        f"norm ratio (with/without): {rep.norm_ratio!r}",
    ]
    return "\n".join(lines) + "\n"
