"""Focal, centerness and IoU losses for one pyramid level.

Each loss sums over its pixels and divides by ``normalizer``, which defaults
to the number of positive pixels in the input (at least 1). Passing the
positive count of the whole pyramid instead makes the per-level losses add up
to the usual all-level average.
"""

from __future__ import annotations

import numpy as np

from .. import autograd as ag
from ..autograd import Tensor
from .targets import LevelTargets

__all__ = ["focal_loss", "centerness_bce", "iou_loss", "FOCAL_ALPHA", "FOCAL_GAMMA", "LOG_CLAMP"]

FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0
LOG_CLAMP = 1e-12


def _clamped_log(x: Tensor) -> Tensor:
    return ag.log(ag.maximum(x, LOG_CLAMP))


def _normalizer(targets: LevelTargets, normalizer) -> float:
    return float(max(targets.num_positive, 1) if normalizer is None else max(normalizer, 1))


def _zero_like_graph(x: Tensor) -> Tensor:
    # keeps parameters behind x in the graph with zero gradient
    return ag.sum(x) * 0.0


def focal_loss(
    cls_map: Tensor,
    targets: LevelTargets,
    alpha: float = FOCAL_ALPHA,
    gamma: float = FOCAL_GAMMA,
    normalizer=None,
) -> Tensor:
    """``-alpha_t (1 - p_t)^gamma log p_t`` summed over every pixel and class."""
    n, k, h, w = cls_map.shape
    cls = targets.cls.reshape(n, h, w)
    onehot = (cls[:, None, :, :] == np.arange(k)[None, :, None, None]).astype(cls_map.dtype)
    p_t = cls_map * (2.0 * onehot - 1.0) + (1.0 - onehot)
    alpha_t = alpha * onehot + (1.0 - alpha) * (1.0 - onehot)
    ce = -_clamped_log(p_t)
    loss = ce * alpha_t if gamma == 0 else ce * alpha_t * ag.power(1.0 - p_t, gamma)
    return ag.sum(loss) / _normalizer(targets, normalizer)


def _positive_rows(x: Tensor, mask: np.ndarray) -> Tensor:
    # [N, C, H, W] -> [P, C] at the masked pixels
    return ag.transpose(x, (0, 2, 3, 1))[mask]


def centerness_bce(ctr_map: Tensor, targets: LevelTargets, normalizer=None) -> Tensor:
    """Binary cross-entropy between predicted and target centerness on positive pixels."""
    n, _, h, w = ctr_map.shape
    mask = targets.positive.reshape(n, h, w)
    if not mask.any():
        return _zero_like_graph(ctr_map)
    pred = _positive_rows(ctr_map, mask)[:, 0]
    tgt = targets.ctr.reshape(n, h, w)[mask]
    bce = -(tgt * _clamped_log(pred) + (1.0 - tgt) * _clamped_log(1.0 - pred))
    return ag.sum(bce) / _normalizer(targets, normalizer)


def iou_loss(reg_map: Tensor, targets: LevelTargets, normalizer=None) -> Tensor:
    """``-log IoU`` between predicted and target boxes, both anchored at the pixel."""
    n, _, h, w = reg_map.shape
    mask = targets.positive.reshape(n, h, w)
    if not mask.any():
        return _zero_like_graph(reg_map)
    pred = _positive_rows(reg_map, mask)
    tgt = targets.ltrb.reshape(n, h, w, 4)[mask]
    pl, pt, pr, pb = (pred[:, i] for i in range(4))
    tl, tt, tr, tb = (tgt[:, i] for i in range(4))
    pred_area = (pl + pr) * (pt + pb)
    tgt_area = (tl + tr) * (tt + tb)
    w_inter = ag.minimum(pl, tl) + ag.minimum(pr, tr)
    h_inter = ag.minimum(pt, tt) + ag.minimum(pb, tb)
    inter = w_inter * h_inter
    union = pred_area + tgt_area - inter
    return -ag.sum(_clamped_log(inter / union)) / _normalizer(targets, normalizer)
