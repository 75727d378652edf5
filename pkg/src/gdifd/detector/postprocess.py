"""Turn head outputs into scored, class-wise NMS-filtered boxes."""

from __future__ import annotations

from typing import Mapping

import numpy as np

from .boxes import Detection, box_iou
from .head import HeadOutputs
from .targets import locations

__all__ = ["decode_level", "nms", "batched_nms", "detect"]


def _array(x) -> np.ndarray:
    return np.asarray(getattr(x, "data", x))


def decode_level(outputs: HeadOutputs, level: int, image_index: int = 0):
    """Candidate (boxes, classes, scores) for every pixel and class of one image."""
    cls = _array(outputs.cls_map)[image_index]  # [K, H, W]
    ctr = _array(outputs.ctr_map)[image_index, 0]
    reg = _array(outputs.reg_map)[image_index]  # [4, H, W]
    k, h, w = cls.shape
    gx, gy = locations(level, h, w)
    boxes = np.stack([gx - reg[0], gy - reg[1], gx + reg[2], gy + reg[3]], axis=-1).reshape(-1, 4)
    scores = (cls * ctr[None]).reshape(k, -1)  # [K, H*W]
    cand_cls = np.repeat(np.arange(k), h * w)
    cand_pix = np.tile(np.arange(h * w), k)
    return boxes[cand_pix], cand_cls, scores.reshape(-1)


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> np.ndarray:
    """Greedy NMS; returns kept indices in descending score order."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    order = np.argsort(-np.asarray(scores), kind="stable")
    keep = []
    while order.size:
        i = order[0]
        keep.append(i)
        if order.size == 1:
            break
        ious = box_iou(boxes[i : i + 1], boxes[order[1:]])[0]
        order = order[1:][ious <= iou_threshold]
    return np.asarray(keep, dtype=np.int64)


def batched_nms(boxes, scores, classes, iou_threshold: float) -> np.ndarray:
    keep = []
    for c in np.unique(classes):
        idx = np.nonzero(classes == c)[0]
        keep.extend(idx[nms(boxes[idx], scores[idx], iou_threshold)])
    keep = np.asarray(keep, dtype=np.int64)
    return keep[np.argsort(-scores[keep], kind="stable")]


def detect(
    outputs: Mapping[int, HeadOutputs],
    score_thresh: float = 0.05,
    nms_iou: float = 0.6,
    max_detections: int = 100,
    image_size: tuple[int, int] | None = None,
) -> list[Detection]:
    """Decode every image of a batch; ``outputs`` maps pyramid level to head outputs."""
    levels = sorted(outputs)
    batch = _array(outputs[levels[0]].cls_map).shape[0]
    results = []
    for n in range(batch):
        parts = [decode_level(outputs[l], l, n) for l in levels]
        boxes = np.concatenate([p[0] for p in parts])
        classes = np.concatenate([p[1] for p in parts])
        scores = np.concatenate([p[2] for p in parts])
        sel = scores > score_thresh
        boxes, classes, scores = boxes[sel], classes[sel], scores[sel]
        if image_size is not None:
            h, w = image_size
            boxes = np.clip(boxes, 0, [w, h, w, h])
        keep = batched_nms(boxes, scores, classes, nms_iou)[:max_detections]
        results.append(Detection(boxes[keep].reshape(-1, 4), classes[keep], scores[keep]))
    return results

