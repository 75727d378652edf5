"""Input checks shared by the estimator and the CLI."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .detector.backbone import IMAGE_MULTIPLE
from .detector.boxes import GroundTruth

__all__ = ["check_images", "check_ground_truths", "check_domains"]


def check_images(X, name: str = "X") -> np.ndarray:
    """Return ``X`` as a finite float64 ``[N, 3, H, W]`` array with H, W multiples of 128."""
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[1] != 3:
        raise ValueError(f"{name} must have shape [N, 3, H, W], got {np.shape(X)}")
    if arr.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    h, w = arr.shape[2:]
    if h % IMAGE_MULTIPLE or w % IMAGE_MULTIPLE:
        raise ValueError(f"{name}: height and width must be multiples of {IMAGE_MULTIPLE}, got {h}x{w}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or infinite values")
    return arr


def _as_ground_truth(item) -> GroundTruth:
    if isinstance(item, GroundTruth):
        return item
    if isinstance(item, dict):
        return GroundTruth.from_dict(item)
    boxes, classes = item
    return GroundTruth(boxes, classes)


def check_ground_truths(y: Sequence, n: int, image_shape=None) -> list[GroundTruth]:
    """Accepts :class:`GroundTruth` objects, ``{"boxes", "classes"}`` dicts or ``(boxes, classes)`` pairs."""
    if len(y) != n:
        raise ValueError(f"got {len(y)} ground truths for {n} images")
    gts = [_as_ground_truth(item) for item in y]
    for i, gt in enumerate(gts):
        if len(gt) and gt.classes.min() < 0:
            raise ValueError(f"ground truth {i}: negative class index")
        if image_shape is not None and len(gt):
            h, w = image_shape
            if gt.boxes[:, [0, 1]].min() < 0 or gt.boxes[:, 2].max() > w or gt.boxes[:, 3].max() > h:
                raise ValueError(f"ground truth {i}: box outside the {w}x{h} image")
    return gts


def check_domains(domains, n: int) -> tuple[np.ndarray, int]:
    """Integer domain labels ``0 .. M-1`` with every domain present and ``M >= 2``."""
    d = np.asarray(domains)
    if d.shape != (n,):
        raise ValueError(f"domains must have shape ({n},), got {d.shape}")
    if not np.issubdtype(d.dtype, np.integer):
        if not np.all(np.equal(np.mod(d, 1), 0)):
            raise ValueError("domain labels must be integers")
        d = d.astype(np.int64)
    present = np.unique(d)
    m = int(present.max()) + 1 if present.size else 0
    if present.min() < 0 or len(present) != m:
        raise ValueError(f"domain labels must cover 0..M-1 without gaps, got {present.tolist()}")
    if m < 2:
        raise ValueError("need at least two source domains")
    return d.astype(np.int64), m
