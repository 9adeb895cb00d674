"""Static skeleton overlay rendering (predicted vs ground truth) as SVG files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .datamodel import (
    IMAGE_HEIGHT,
    IMAGE_WIDTH,
    KEYPOINT_INDEX,
    NUM_KEYPOINTS,
    SKELETON_EDGES,
    SkeletonFrame,
)

_EDGE_INDICES = [(KEYPOINT_INDEX[a], KEYPOINT_INDEX[b]) for a, b in SKELETON_EDGES]


def _draw_skeleton(ax, keypoints: np.ndarray, color: str, label: str, style: str = "-") -> None:
    for i, j in _EDGE_INDICES:
        ax.plot(
            [keypoints[i, 0], keypoints[j, 0]],
            [keypoints[i, 1], keypoints[j, 1]],
            style,
            color=color,
            linewidth=1.5,
        )
    ax.scatter(keypoints[:, 0], keypoints[:, 1], s=12, color=color, label=label, zorder=3)


def render_overlay(
    pred: np.ndarray,
    gt: SkeletonFrame | None,
    path: str | Path,
    title: str = "",
) -> Path:
    """Write one frame's predicted (and optionally ground-truth) skeleton."""
    pred = np.asarray(pred, dtype=np.float64).reshape(NUM_KEYPOINTS, 2)
    fig, ax = plt.subplots(figsize=(5, 5 * IMAGE_HEIGHT / IMAGE_WIDTH))
    if gt is not None:
        _draw_skeleton(ax, gt.keypoints, "tab:green", "ground truth")
    _draw_skeleton(ax, pred, "tab:red", "prediction", style="--")
    ax.set_xlim(0, IMAGE_WIDTH)
    ax.set_ylim(IMAGE_HEIGHT, 0)  # image coordinates: y grows downward
    ax.set_aspect("equal")
    ax.legend(loc="upper right", fontsize=8)
    if title:
        ax.set_title(title, fontsize=9)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format=path.suffix.lstrip(".") or "svg")
    plt.close(fig)
    return path


def render_predictions(
    preds: np.ndarray,
    gts: list[SkeletonFrame],
    out_dir: str | Path,
    limit: int = 8,
) -> list[Path]:
    out_dir = Path(out_dir)
    written = []
    for i, (pred, gt) in enumerate(zip(preds, gts)):
        if i >= limit:
            break
        written.append(
            render_overlay(pred, gt, out_dir / f"frame_{i:04d}.svg", title=f"t={gt.timestamp_ms} ms")
        )
    return written
