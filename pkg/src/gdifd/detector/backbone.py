"""Toy convolutional backbone with a feature pyramid producing levels 3..7."""

from __future__ import annotations

import numpy as np

from .. import autograd as ag
from ..autograd import Tensor
from ..nn import Conv2d, Module
from .targets import LEVELS

__all__ = ["BackboneFPN", "IMAGE_MULTIPLE"]

IMAGE_MULTIPLE = 2 ** max(LEVELS)


class BackboneFPN(Module):
    """Four stride-2 conv stages (strides 2, 4, 8, 16) followed by an FPN.

    Stages 3 and 4 feed 1x1 laterals merged top-down into P3/P4; P5-P7 come
    from successive stride-2 convs on top of P4. Every level has ``channels``
    channels.
    """

    def __init__(self, channels: int = 16, in_channels: int = 3, stem: int = 8, rng=None):
        rng = np.random.default_rng() if rng is None else rng
        self.channels = channels
        widths = [in_channels, stem, channels, channels, channels]
        self.stages = [Conv2d(widths[i], widths[i + 1], 3, stride=2, rng=rng) for i in range(4)]
        self.lateral3 = Conv2d(channels, channels, 1, rng=rng, gain=1.0)
        self.lateral4 = Conv2d(channels, channels, 1, rng=rng, gain=1.0)
        self.smooth3 = Conv2d(channels, channels, 3, rng=rng, gain=1.0)
        self.smooth4 = Conv2d(channels, channels, 3, rng=rng, gain=1.0)
        self.down5 = Conv2d(channels, channels, 3, stride=2, rng=rng, gain=1.0)
        self.down6 = Conv2d(channels, channels, 3, stride=2, rng=rng, gain=1.0)
        self.down7 = Conv2d(channels, channels, 3, stride=2, rng=rng, gain=1.0)

    @staticmethod
    def check_input(images: Tensor) -> None:
        if images.ndim != 4:
            raise ValueError(f"expected images of shape [N, 3, H, W], got {images.shape}")
        h, w = images.shape[2:]
        if h % IMAGE_MULTIPLE or w % IMAGE_MULTIPLE:
            raise ValueError(f"image height and width must be multiples of {IMAGE_MULTIPLE}, got {h}x{w}")

    def forward(self, images: Tensor) -> dict[int, Tensor]:
        self.check_input(images)
        x = images
        feats = []
        for stage in self.stages:
            x = ag.relu(stage(x))
            feats.append(x)
        c3, c4 = feats[2], feats[3]
        p4 = self.lateral4(c4)
        p3 = self.lateral3(c3) + ag.upsample_nearest(p4, 2)
        p3 = self.smooth3(p3)
        p4 = self.smooth4(p4)
        p5 = self.down5(p4)
        p6 = self.down6(ag.relu(p5))
        p7 = self.down7(ag.relu(p6))
        return {3: p3, 4: p4, 5: p5, 6: p6, 7: p7}
