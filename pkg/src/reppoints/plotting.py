"""Point-set overlays rendered to PNG files.

Stage-1 points are drawn as hollow circles, stage-2 points as filled dots and
the pseudo box as a rectangle outline.  Everything goes through the Agg
backend so the functions work without a display.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.patches import Rectangle  # noqa: E402

CLASS_COLORS = ("tab:red", "tab:blue", "tab:green", "tab:orange", "tab:purple", "tab:cyan")
GT_COLOR = "white"


def overlay_figure(image: np.ndarray, scale: float = 4.0):
    """Blank figure showing ``image`` at ``scale`` inches per 128 pixels."""
    h, w = image.shape[:2]
    fig, ax = plt.subplots(figsize=(scale * w / 128, scale * h / 128), dpi=100)
    ax.imshow(image, interpolation="nearest", extent=(0, w, h, 0))
    ax.set_xlim(0, w)
    ax.set_ylim(h, 0)
    ax.set_axis_off()
    fig.subplots_adjust(0, 0, 1, 1)
    return fig, ax


def draw_box(ax, box, color, lw=1.2, ls="-", label=None):
    x0, y0, x1, y1 = (float(v) for v in box)
    ax.add_patch(Rectangle((x0, y0), x1 - x0, y1 - y0, fill=False, edgecolor=color, linewidth=lw, linestyle=ls))
    if label:
        ax.text(x0, y0 - 1, label, color=color, fontsize=6, va="bottom")


def draw_points(ax, points, color, filled: bool, size: float = 14):
    p = np.asarray(points, dtype=float).reshape(-1, 2)
    if filled:
        ax.scatter(p[:, 0], p[:, 1], s=size, c=color, edgecolors="black", linewidths=0.3, zorder=3)
    else:
        ax.scatter(p[:, 0], p[:, 1], s=size * 1.6, facecolors="none", edgecolors=color, linewidths=0.9, zorder=3)


def save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # fixed metadata keeps repeated renders byte-identical
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def render_detections(image: np.ndarray, detections, path, gt_boxes=(), class_names=None) -> Path:
    """One PNG per image: GT dashed, each detection with its stage-1 / stage-2 points and box."""
    fig, ax = overlay_figure(image)
    for box in gt_boxes:
        draw_box(ax, box, GT_COLOR, lw=0.8, ls="--")
    for d in detections:
        color = CLASS_COLORS[d.class_id % len(CLASS_COLORS)]
        name = class_names[d.class_id] if class_names else str(d.class_id)
        draw_box(ax, d.box, color, label=f"{name} {d.score:.2f}")
        if d.points_stage1 is not None:
            draw_points(ax, d.points_stage1, color, filled=False)
        if d.points is not None:
            draw_points(ax, d.points, color, filled=True)
    return save(fig, path)


def render_study_panel(image: np.ndarray, boxes, point_sets, path, gt_box=None, title=None) -> Path:
    """Several hypotheses of one object, each with its own color."""
    fig, ax = overlay_figure(image, scale=3.0)
    if gt_box is not None:
        draw_box(ax, gt_box, GT_COLOR, lw=0.8, ls="--")
    for k, (box, pts) in enumerate(zip(boxes, point_sets)):
        color = CLASS_COLORS[k % len(CLASS_COLORS)]
        draw_box(ax, box, color, lw=0.9)
        draw_points(ax, pts, color, filled=True, size=10)
    if title:
        ax.text(1, 1, title, color="white", fontsize=6, va="top")
    return save(fig, path)


def render_pr_curves(precision: np.ndarray, recall_points, class_names, path, thresholds=(0.5, 0.75)) -> Path:
    """Interpolated precision-recall curves per class at the given IoU thresholds.

    ``precision`` is the evaluator's (T, R, K) table with -1 where a class has no ground truth.
    """
    fig, axes = plt.subplots(1, len(thresholds), figsize=(3.2 * len(thresholds), 3.0), dpi=100, squeeze=False)
    for ax, thr in zip(axes[0], thresholds):
        t = int(round((thr - 0.5) / 0.05))
        for k, name in enumerate(class_names):
            p = precision[t, :, k]
            if (p > -1).any():
                ax.plot(recall_points, p, color=CLASS_COLORS[k % len(CLASS_COLORS)], lw=1.2, label=name)
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1.02)
        ax.set_xlabel("recall")
        ax.set_title(f"IoU {thr:.2f}", fontsize=9)
    axes[0, 0].set_ylabel("precision")
    axes[0, 0].legend(fontsize=7, loc="lower left")
    fig.tight_layout()
    return save(fig, path)
