"""Per-pixel target assignment for the anchor-free head.

A feature cell ``(i, j)`` on level ``l`` sits at image location
``(stride // 2 + j * stride, stride // 2 + i * stride)`` with ``stride = 2**l``.
It is positive for a box when the location lies strictly inside the box and
the largest of its four side distances falls in the level's size range. When
several boxes qualify, the one with the smallest area wins (lowest index on
ties).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .boxes import GroundTruth, box_area

__all__ = ["LEVELS", "LEVEL_RANGES", "level_stride", "locations", "LevelTargets", "assign_targets", "centerness"]

LEVELS = (3, 4, 5, 6, 7)
# FCOS regression ranges (64/128/256/512 px at 800 px input) scaled 1/8 for 128 px images
LEVEL_RANGES = {3: (0.0, 8.0), 4: (8.0, 16.0), 5: (16.0, 32.0), 6: (32.0, 64.0), 7: (64.0, np.inf)}


def level_stride(level: int) -> int:
    return 2**level


def locations(level: int, height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """Image-space (x, y) grids of shape [height, width] for a level's cells."""
    s = level_stride(level)
    xs = s // 2 + np.arange(width) * s
    ys = s // 2 + np.arange(height) * s
    gx, gy = np.meshgrid(xs.astype(np.float64), ys.astype(np.float64))
    return gx, gy


def centerness(ltrb: np.ndarray) -> np.ndarray:
    l, t, r, b = (ltrb[..., k] for k in range(4))
    lr = np.minimum(l, r) / np.maximum(np.maximum(l, r), 1e-12)
    tb = np.minimum(t, b) / np.maximum(np.maximum(t, b), 1e-12)
    return np.sqrt(np.clip(lr * tb, 0.0, None))


@dataclass
class LevelTargets:
    """Targets for one level; arrays carry a leading batch axis when stacked."""

    cls: np.ndarray  # int, -1 for negatives
    ltrb: np.ndarray  # [..., 4], zero at negatives
    ctr: np.ndarray  # zero at negatives

    @property
    def positive(self) -> np.ndarray:
        return self.cls >= 0

    @property
    def num_positive(self) -> int:
        return int(self.positive.sum())

    @classmethod
    def stack(cls, items: list["LevelTargets"]) -> "LevelTargets":
        return cls(
            np.stack([t.cls for t in items]),
            np.stack([t.ltrb for t in items]),
            np.stack([t.ctr for t in items]),
        )


def assign_targets(gt: GroundTruth, level: int, feature_shape) -> LevelTargets:
    """Assign class, side distances and centerness to every cell of one level.

    ``feature_shape`` may be ``(H, W)`` or any shape ending in ``H, W``.
    """
    h, w = int(feature_shape[-2]), int(feature_shape[-1])
    cls = np.full((h, w), -1, dtype=np.int64)
    ltrb = np.zeros((h, w, 4))
    ctr = np.zeros((h, w))
    if len(gt) == 0:
        return LevelTargets(cls, ltrb, ctr)
    gx, gy = locations(level, h, w)
    boxes = gt.boxes
    # distances [H, W, G, 4]
    d = np.stack(
        [
            gx[..., None] - boxes[:, 0],
            gy[..., None] - boxes[:, 1],
            boxes[:, 2] - gx[..., None],
            boxes[:, 3] - gy[..., None],
        ],
        axis=-1,
    )
    lo, hi = LEVEL_RANGES[level]
    reach = d.max(axis=-1)
    ok = (d.min(axis=-1) > 0) & (reach > lo) & (reach <= hi)
    areas = np.where(ok, box_area(boxes)[None, None, :], np.inf)
    best = areas.argmin(axis=-1)
    pos = np.isfinite(areas.min(axis=-1))
    ii, jj = np.nonzero(pos)
    chosen = best[ii, jj]
    cls[ii, jj] = gt.classes[chosen]
    ltrb[ii, jj] = d[ii, jj, chosen]
    ctr[ii, jj] = centerness(ltrb[ii, jj])
    return LevelTargets(cls, ltrb, ctr)
