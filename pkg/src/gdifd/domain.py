"""Domain supervision on the specific part and adversarial alignment of the invariant part."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .nn import Conv2d, Module, softmax_channels

__all__ = [
    "DomainLabel",
    "DomainClassifier",
    "GrlDiscriminator",
    "grl",
    "domain_xent",
    "domain_cls_loss",
    "domain_adv_loss",
    "GRL_WEIGHT",
    "LOG_CLAMP",
]

GRL_WEIGHT = 0.01
LOG_CLAMP = 1e-12


@dataclass(frozen=True)
class DomainLabel:
    index: int
    num_domains: int
    one_hot: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.num_domains < 2:
            raise ValueError(f"domain recognition needs at least 2 domains, got {self.num_domains}")
        if not 0 <= self.index < self.num_domains:
            raise ValueError(f"domain index {self.index} outside [0, {self.num_domains})")
        vec = np.zeros(self.num_domains)
        vec[self.index] = 1.0
        object.__setattr__(self, "one_hot", vec)


def grl(x: Tensor, lambda_grl: float = GRL_WEIGHT) -> Tensor:
    """Identity forward; multiplies the incoming gradient by ``-lambda_grl``."""
    scale = -float(lambda_grl)
    return ag._make(x.data, (x,), lambda g: (g * scale,), "grl")


class DomainClassifier(Module):
    """Five 3x3 convs with ReLU in between; per-pixel softmax over ``num_domains``."""

    def __init__(self, channels: int, num_domains: int, hidden: int | None = None, rng=None):
        if num_domains < 2:
            raise ValueError(f"domain recognition needs at least 2 domains, got {num_domains}")
        rng = np.random.default_rng() if rng is None else rng
        hidden = channels if hidden is None else hidden
        self.channels = channels
        self.num_domains = num_domains
        widths = [channels] + [hidden] * 4
        self.convs = [Conv2d(widths[i], hidden, 3, rng=rng) for i in range(4)]
        self.last = Conv2d(hidden, num_domains, 3, rng=rng, gain=1.0)

    def logits(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ValueError(f"domain classifier expects [N, {self.channels}, H, W], got {x.shape}")
        for conv in self.convs:
            x = ag.relu(conv(x))
        return self.last(x)

    def forward(self, x: Tensor) -> Tensor:
        return softmax_channels(self.logits(x))


class GrlDiscriminator(Module):
    """A :class:`DomainClassifier` behind a gradient reversal stage."""

    def __init__(self, channels: int, num_domains: int, lambda_grl: float = GRL_WEIGHT, hidden=None, rng=None):
        self.lambda_grl = lambda_grl
        self.classifier = DomainClassifier(channels, num_domains, hidden=hidden, rng=rng)

    @property
    def num_domains(self) -> int:
        return self.classifier.num_domains

    def forward(self, x: Tensor) -> Tensor:
        return self.classifier(grl(x, self.lambda_grl))


def _label_index(label, num_domains: int) -> int:
    if isinstance(label, DomainLabel):
        if label.num_domains != num_domains:
            raise ValueError(f"label has {label.num_domains} domains, network predicts {num_domains}")
        return label.index
    return DomainLabel(int(label), num_domains).index


def domain_xent(features: Tensor, label, net: Module) -> Tensor:
    """Per-pixel cross-entropy of ``net``'s domain prediction, mean over pixels and batch.

    ``net`` is either a plain classifier or a discriminator; the latter reverses
    the gradient reaching ``features`` and nothing else changes.
    """
    probs = net(features)
    idx = _label_index(label, probs.shape[1])
    p_true = probs[:, idx]
    return -ag.mean(ag.log(ag.maximum(p_true, LOG_CLAMP)))


def domain_cls_loss(f_ds: Tensor, label, clf: DomainClassifier) -> Tensor:
    return domain_xent(f_ds, label, clf)


def domain_adv_loss(f_di: Tensor, label, disc: GrlDiscriminator) -> Tensor:
    return domain_xent(f_di, label, disc)
