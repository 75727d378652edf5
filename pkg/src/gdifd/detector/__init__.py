"""A small anchor-free detector over a five-level feature pyramid."""

from .backbone import IMAGE_MULTIPLE, BackboneFPN
from .boxes import Detection, GroundTruth, box_area, box_iou
from .head import FCOSHead, HeadOutputs
from .losses import centerness_bce, focal_loss, iou_loss
from .metrics import average_precision, map_at_05
from .postprocess import batched_nms, decode_level, detect, nms
from .targets import LEVEL_RANGES, LEVELS, LevelTargets, assign_targets, centerness, level_stride, locations

__all__ = [
    "IMAGE_MULTIPLE",
    "BackboneFPN",
    "Detection",
    "GroundTruth",
    "box_area",
    "box_iou",
    "FCOSHead",
    "HeadOutputs",
    "centerness_bce",
    "focal_loss",
    "iou_loss",
    "average_precision",
    "map_at_05",
    "batched_nms",
    "decode_level",
    "detect",
    "nms",
    "LEVEL_RANGES",
    "LEVELS",
    "LevelTargets",
    "assign_targets",
    "centerness",
    "level_stride",
    "locations",
]
