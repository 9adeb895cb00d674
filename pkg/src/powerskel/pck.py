"""PCK@alpha evaluation: torso-normalized percentage of correct keypoints.

A predicted keypoint counts as correct at threshold alpha when its Euclidean
distance to the ground truth, divided by the subject's torso length (right
shoulder to left hip in the ground truth), is <= alpha. Samples whose torso
reference is invisible or degenerate are excluded from every keypoint's
denominator and counted; a keypoint invisible in one sample drops that
sample from that keypoint's denominator only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .datamodel import (
    KEYPOINT_NAMES,
    LABEL_DIM,
    LEFT_HIP,
    NUM_KEYPOINTS,
    RIGHT_SHOULDER,
    SkeletonFrame,
)

DEFAULT_ALPHAS = (0.1, 0.2, 0.3, 0.4, 0.5)


class DegeneratePoseError(ValueError):
    """Torso reference keypoints coincide; the pose cannot normalize errors."""


class EmptyReportError(ValueError):
    pass


@dataclass(frozen=True)
class PCKConfig:
    alphas: tuple[float, ...] = DEFAULT_ALPHAS
    rs_index: int = RIGHT_SHOULDER
    lh_index: int = LEFT_HIP

    def __post_init__(self) -> None:
        alphas = tuple(self.alphas)
        if not alphas or any(a <= 0 for a in alphas):
            raise ValueError("alphas must be positive")
        for idx in (self.rs_index, self.lh_index):
            if not 0 <= idx < NUM_KEYPOINTS:
                raise ValueError(f"keypoint index {idx} out of range")
        if self.rs_index == self.lh_index:
            raise ValueError("torso endpoints must be distinct keypoints")
        object.__setattr__(self, "alphas", alphas)


def torso_length(gt: SkeletonFrame, config: PCKConfig | None = None) -> float:
    """Euclidean distance between the ground-truth torso endpoints."""
    config = config or PCKConfig()
    if not (gt.visibility[config.rs_index] and gt.visibility[config.lh_index]):
        raise DegeneratePoseError("torso endpoints are not both visible")
    rs = gt.keypoints[config.rs_index]
    lh = gt.keypoints[config.lh_index]
    length = float(math.hypot(rs[0] - lh[0], rs[1] - lh[1]))
    if length == 0.0:
        raise DegeneratePoseError("torso endpoints coincide")
    return length


@dataclass(frozen=True)
class PCKTable:
    """Per-keypoint fractions correct at each alpha, plus accounting."""

    alphas: tuple[float, ...]
    values: np.ndarray  # (17, len(alphas)) fractions in [0, 1]
    counts: np.ndarray  # (17,) samples contributing to each keypoint
    excluded_samples: int  # samples with no usable torso reference

    def averages(self) -> np.ndarray:
        """Mean over the 17 keypoints at each alpha."""
        return self.values.mean(axis=0)


def pck(
    preds: list[np.ndarray] | np.ndarray,
    gts: list[SkeletonFrame],
    config: PCKConfig | None = None,
) -> PCKTable:
    """Score predicted 34-vectors against ground-truth skeletons."""
    config = config or PCKConfig()
    preds = np.asarray(preds, dtype=np.float64)
    if preds.ndim != 2 or preds.shape[1] != LABEL_DIM:
        raise ValueError(f"predictions must be (N, {LABEL_DIM}), got {preds.shape}")
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions vs {len(gts)} ground truths")
    if len(preds) == 0:
        raise EmptyReportError("no samples to evaluate")

    n_alpha = len(config.alphas)
    correct = np.zeros((NUM_KEYPOINTS, n_alpha), dtype=np.int64)
    counts = np.zeros(NUM_KEYPOINTS, dtype=np.int64)
    excluded = 0
    for pred, gt in zip(preds, gts):
        try:
            torso = torso_length(gt, config)
        except DegeneratePoseError:
            excluded += 1
            continue
        pk = pred.reshape(NUM_KEYPOINTS, 2)
        dist = np.linalg.norm(pk - gt.keypoints, axis=1) / torso
        visible = np.asarray(gt.visibility, dtype=bool)
        counts += visible
        for a, alpha in enumerate(config.alphas):
            correct[:, a] += visible & (dist <= alpha)

    with np.errstate(invalid="ignore"):
        values = np.where(counts[:, None] > 0, correct / np.maximum(counts[:, None], 1), np.nan)
    return PCKTable(
        alphas=config.alphas,
        values=values,
        counts=counts,
        excluded_samples=excluded,
    )


def report(table: PCKTable) -> str:
    """Render the keypoint x alpha table as machine-parsable text.

    One row per keypoint plus an average row; values are percentages
    clamped to [0, 100] with two decimals.
    """
    headers = ["keypoint"] + [f"PCK@{round(a * 100):d}" for a in table.alphas]
    width = max(len(name) for name in KEYPOINT_NAMES + ("average",)) + 2
    lines = [headers[0].ljust(width) + "".join(h.rjust(9) for h in headers[1:])]

    def fmt_row(name: str, row: np.ndarray) -> str:
        cells = []
        for value in row:
            if np.isnan(value):
                cells.append("nan".rjust(9))
            else:
                cells.append(f"{min(max(value * 100.0, 0.0), 100.0):.2f}".rjust(9))
        return name.ljust(width) + "".join(cells)

    for i, name in enumerate(KEYPOINT_NAMES):
        lines.append(fmt_row(name, table.values[i]))
    lines.append(fmt_row("average", table.averages()))
    lines.append(f"# excluded_samples: {table.excluded_samples}")
    return "\n".join(lines)


def parse_report(text: str) -> dict[str, list[float]]:
    """Recover row name -> percentage values from a rendered report."""
    rows: dict[str, list[float]] = {}
    for line in text.splitlines():
        if not line or line.startswith("#") or line.startswith("keypoint"):
            continue
        parts = line.split()
        rows[parts[0]] = [float(p) for p in parts[1:]]
    return rows
