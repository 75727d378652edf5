"""Anchor-free detection head shared across pyramid levels."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import autograd as ag
from ..autograd import Tensor
from ..nn import Conv2d, Module, special_bias_init

__all__ = ["HeadOutputs", "FCOSHead"]

CLS_PRIOR = 0.01


@dataclass
class HeadOutputs:
    cls_map: Tensor  # [N, K, H, W] sigmoid scores
    ctr_map: Tensor  # [N, 1, H, W] sigmoid centerness
    reg_map: Tensor  # [N, 4, H, W] left, top, right, bottom distances in pixels


class FCOSHead(Module):
    """Small conv tower then one conv emitting class, centerness and box channels.

    Box distances are ``exp(raw) * stride`` so they are always positive.
    """

    def __init__(self, channels: int, num_classes: int, tower: int = 2, rng=None):
        rng = np.random.default_rng() if rng is None else rng
        self.channels = channels
        self.num_classes = num_classes
        self.tower = [Conv2d(channels, channels, 3, rng=rng) for _ in range(tower)]
        self.out = Conv2d(channels, num_classes + 5, 3, rng=rng, gain=0.1)
        bias = self.out.bias.data
        bias[:num_classes] = special_bias_init(CLS_PRIOR)

    def forward(self, feature: Tensor, stride: int) -> HeadOutputs:
        if feature.ndim != 4 or feature.shape[1] != self.channels:
            raise ValueError(f"head expects [N, {self.channels}, H, W], got {feature.shape}")
        x = feature
        for conv in self.tower:
            x = ag.relu(conv(x))
        raw = self.out(x)
        k = self.num_classes
        cls_map = ag.sigmoid(raw[:, :k])
        ctr_map = ag.sigmoid(raw[:, k : k + 1])
        reg_map = ag.exp(raw[:, k + 1 :]) * float(stride)
        return HeadOutputs(cls_map, ctr_map, reg_map)
