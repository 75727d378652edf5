"""Average precision at IoU 0.5 with all-point (envelope) interpolation."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .boxes import Detection, GroundTruth, box_iou

__all__ = ["average_precision", "map_at_05"]


def average_precision(tp: np.ndarray, num_gt: int) -> float:
    """Area under the precision envelope for detections already sorted by score."""
    if num_gt <= 0:
        raise ValueError("average precision is undefined without ground truth")
    tp = np.asarray(tp, dtype=np.float64)
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / num_gt
    precision = ctp / (ctp + cfp)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def map_at_05(
    detections: Sequence[Detection],
    ground_truths: Sequence[GroundTruth],
    num_classes: int | None = None,
    iou_threshold: float = 0.5,
) -> dict:
    """Per-class AP and their mean over classes present in the ground truth.

    Detections of a class are ranked by score across the whole dataset; each
    is a true positive if its best-overlapping same-class box in the same
    image reaches the IoU threshold and has not been claimed yet.
    """
    if len(detections) != len(ground_truths):
        raise ValueError(f"{len(detections)} detection lists for {len(ground_truths)} images")
    if num_classes is None:
        seen = [g.classes for g in ground_truths] + [d.classes for d in detections]
        num_classes = int(max((c.max() for c in seen if len(c)), default=-1)) + 1
    per_class = {}
    for c in range(num_classes):
        num_gt = int(sum(int(np.sum(g.classes == c)) for g in ground_truths))
        if num_gt == 0:
            continue
        records = []
        for img, det in enumerate(detections):
            sel = np.nonzero(det.classes == c)[0]
            records.extend((float(det.scores[i]), img, det.boxes[i]) for i in sel)
        records.sort(key=lambda r: -r[0])
        claimed = {img: np.zeros(int(np.sum(g.classes == c)), dtype=bool) for img, g in enumerate(ground_truths)}
        tp = np.zeros(len(records))
        for r, (_, img, box) in enumerate(records):
            gt_boxes = ground_truths[img].boxes[ground_truths[img].classes == c]
            if len(gt_boxes) == 0:
                continue
            ious = box_iou(box[None], gt_boxes)[0]
            best = int(np.argmax(ious))
            if ious[best] >= iou_threshold and not claimed[img][best]:
                claimed[img][best] = True
                tp[r] = 1.0
        per_class[c] = average_precision(tp, num_gt)
    m = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return {"ap": per_class, "map": m}
