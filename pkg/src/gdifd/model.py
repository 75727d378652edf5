"""The full detector with one gate module and head shared by all pyramid levels."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import Tensor
from .detector.backbone import BackboneFPN
from .detector.head import FCOSHead, HeadOutputs
from .detector.targets import LEVELS, level_stride
from .domain import DomainClassifier, GrlDiscriminator
from .gating import ChannelGateModule, split
from .nn import Module

__all__ = ["LevelOutputs", "GDIFDModel"]


@dataclass
class LevelOutputs:
    f_b: Tensor
    s_di: Tensor | None
    f_di: Tensor
    f_ds: Tensor | None
    head: HeadOutputs


class GDIFDModel(Module):
    """Detector with channel-gated disentanglement on every pyramid level.

    With ``gated=False`` the gate module is bypassed and the head sees the raw
    backbone features (the non-disentangled baselines).
    """

    def __init__(
        self,
        num_classes: int,
        num_domains: int,
        channels: int = 16,
        s_init: float = 0.9999,
        special_init: bool = True,
        lambda_grl: float = 0.01,
        gated: bool = True,
        seed: int = 0,
    ):
        rng = np.random.default_rng(seed)
        self.num_classes = num_classes
        self.num_domains = num_domains
        self.channels = channels
        self.gated = gated
        self.backbone = BackboneFPN(channels, rng=rng)
        self.cgm = ChannelGateModule(channels, s_init=s_init, special_init=special_init, rng=rng)
        self.head = FCOSHead(channels, num_classes, rng=rng)
        self.classifiers = [DomainClassifier(channels, num_domains, rng=rng) for _ in LEVELS]
        self.discriminators = [GrlDiscriminator(channels, num_domains, lambda_grl, rng=rng) for _ in LEVELS]
        self.check_topology()

    def check_topology(self) -> None:
        """One gate module and head for all levels; disjoint domain nets per level."""
        nets = self.classifiers + self.discriminators
        if len(self.classifiers) != len(LEVELS) or len(self.discriminators) != len(LEVELS):
            raise AssertionError("need one domain classifier and one discriminator per level")
        seen: set[int] = set()
        for net in nets:
            ids = {id(p) for p in net.parameters()}
            if ids & seen:
                raise AssertionError("per-level domain networks share parameters")
            seen |= ids
        shared = {id(p) for p in self.cgm.parameters()} | {id(p) for p in self.head.parameters()}
        if shared & seen:
            raise AssertionError("domain networks overlap the shared gate/head")

    def level_index(self, level: int) -> int:
        return LEVELS.index(level)

    def forward(self, images) -> dict[int, LevelOutputs]:
        images = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=np.float64))
        feats = self.backbone(images)
        out = {}
        for level in LEVELS:
            f_b = feats[level]
            if self.gated:
                s_di = self.cgm(f_b)
                pair = split(f_b, s_di)
                f_di, f_ds = pair.f_di, pair.f_ds
            else:
                s_di, f_di, f_ds = None, f_b, None
            out[level] = LevelOutputs(f_b, s_di, f_di, f_ds, self.head(f_di, level_stride(level)))
        return out

    def trainable_parameters(self, use_dsrl: bool, use_dirl: bool) -> list[Tensor]:
        """Parameters that the enabled loss terms actually reach."""
        params = self.backbone.parameters() + self.head.parameters()
        if self.gated:
            params += self.cgm.parameters()
        if use_dsrl and self.gated:
            for clf in self.classifiers:
                params += clf.parameters()
        if use_dirl:
            for disc in self.discriminators:
                params += disc.parameters()
        return params
