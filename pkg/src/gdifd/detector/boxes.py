"""Box containers and geometry helpers (boxes are ``x1, y1, x2, y2`` in pixels)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["GroundTruth", "Detection", "box_area", "box_iou"]


@dataclass
class GroundTruth:
    boxes: np.ndarray
    classes: np.ndarray

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.classes = np.asarray(self.classes, dtype=np.int64).reshape(-1)
        if len(self.boxes) != len(self.classes):
            raise ValueError(f"{len(self.boxes)} boxes but {len(self.classes)} classes")
        if len(self.boxes) and np.any(self.boxes[:, 2:] <= self.boxes[:, :2]):
            raise ValueError("boxes need x2 > x1 and y2 > y1")

    def __len__(self) -> int:
        return len(self.boxes)

    def to_dict(self) -> dict:
        return {"boxes": self.boxes.tolist(), "classes": self.classes.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruth":
        return cls(np.asarray(d["boxes"], dtype=np.float64).reshape(-1, 4), d["classes"])


@dataclass
class Detection:
    boxes: np.ndarray
    classes: np.ndarray
    scores: np.ndarray

    def __len__(self) -> int:
        return len(self.scores)

    def to_dict(self) -> dict:
        return {
            "boxes": np.round(self.boxes, 3).tolist(),
            "classes": self.classes.tolist(),
            "scores": np.round(self.scores, 6).tolist(),
        }


def box_area(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    return np.clip(boxes[:, 2] - boxes[:, 0], 0, None) * np.clip(boxes[:, 3] - boxes[:, 1], 0, None)


def box_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU matrix of shape [len(a), len(b)]."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
