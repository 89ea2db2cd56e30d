"""Static result figures and a tab-delimited per-pose report.

Figures are rendered with the Agg backend and written without a software tag
so identical inputs give identical PNG bytes.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .core import SpriteSheet  # noqa: E402
from .skeleton import Skeleton  # noqa: E402

DPI = 100
PANEL_INCHES = 2.0
PNG_METADATA = {"Software": None}
ROLE_COLORS = {"root": "#d62728", "pin": "#1f77b4", "tip": "#2ca02c"}


def label_colors(n: int) -> np.ndarray:
    """``(n + 1, 3)`` uint8 palette; row 0 (background) is black."""
    cmap = plt.get_cmap("tab20")
    rows = [(0.0, 0.0, 0.0)] + [cmap(i % 20)[:3] for i in range(n)]
    return np.rint(np.array(rows) * 255).astype(np.uint8)


def label_overlay(image, labels, alpha: float = 0.6) -> np.ndarray:
    """Blend part colors over ``image`` on labeled pixels."""
    labels = np.asarray(labels)
    pal = label_colors(int(labels.max()) if labels.size else 0)
    out = np.asarray(image, dtype=np.float64).copy()
    fg = labels > 0
    out[fg] = (1 - alpha) * out[fg] + alpha * pal[labels[fg]]
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def _grid(rows: list[list[np.ndarray]], titles: list[list[str]], path) -> Path:
    n_rows, n_cols = len(rows), max(len(r) for r in rows)
    fig, axes = plt.subplots(n_rows, n_cols, figsize=(PANEL_INCHES * n_cols, PANEL_INCHES * n_rows), squeeze=False)
    for ax in axes.ravel():
        ax.set_axis_off()
    for r, (imgs, names) in enumerate(zip(rows, titles)):
        for c, (img, name) in enumerate(zip(imgs, names)):
            axes[r, c].imshow(img, interpolation="nearest")
            axes[r, c].set_title(name, fontsize=8)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=DPI, metadata=PNG_METADATA)
    plt.close(fig)
    return path


def parts_figure(sheet: SpriteSheet, labels: list, path) -> Path:
    """Pose images on top, extracted part labels over them below."""
    imgs = [p.image for p in sheet.poses]
    over = [label_overlay(p.image, lab) for p, lab in zip(sheet.poses, labels)]
    names = [f"pose {p.pose_id}" for p in sheet.poses]
    return _grid([imgs, over], [names, [f"parts {n.split()[1]}" for n in names]], path)


def recon_figure(sheet: SpriteSheet, recon: list, pose_mse: list, path) -> Path:
    """Input poses on top, their reconstructions from the selected parts below."""
    imgs = [p.image for p in sheet.poses]
    rec = [img for img, _ in recon]
    names = [f"pose {p.pose_id}" for p in sheet.poses]
    return _grid([imgs, rec], [names, [f"MSE {m:.1f}" for m in pose_mse]], path)


def skeleton_figure(image, skeleton: Skeleton, path, labels=None) -> Path:
    base = np.asarray(image) if labels is None else label_overlay(image, labels)
    fig, ax = plt.subplots(figsize=(2 * PANEL_INCHES, 2 * PANEL_INCHES))
    ax.imshow(base, interpolation="nearest")
    ax.set_axis_off()
    pos = {j.id: (j.x, j.y) for j in skeleton.joints}
    for a, b in skeleton.bones:
        ax.plot([pos[a][0], pos[b][0]], [pos[a][1], pos[b][1]], color="white", lw=1.5)
    for j in skeleton.joints:
        ax.plot(j.x, j.y, "o", ms=4, color=ROLE_COLORS[j.role])
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=DPI, metadata=PNG_METADATA)
    plt.close(fig)
    return path


def write_report(rows: list[dict], path) -> Path:
    """Tab-separated table, one row per pose; columns from the first row."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), delimiter="\t", lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return path
