"""Channel gating: a small conv net predicts which channels are domain invariant."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .nn import Conv2d, InstanceNorm2d, Module, global_avg_pool, special_bias_init

__all__ = ["ChannelGateModule", "DisentangledPair", "cgm_forward", "split", "gate_loss", "GATE_MARGIN"]

GATE_MARGIN = 0.01


class ChannelGateModule(Module):
    """Four 3x3 convs predicting a per-pixel gate map, averaged into one gate per channel.

    Layers 1-3 are followed by instance norm and ReLU; layer 4 feeds the
    sigmoid directly so that its bias alone sets the initial gate level.
    """

    def __init__(
        self,
        channels: int,
        hidden: int | None = None,
        s_init: float = 0.9999,
        special_init: bool = True,
        rng: np.random.Generator | None = None,
    ):
        rng = np.random.default_rng() if rng is None else rng
        hidden = channels if hidden is None else hidden
        self.channels = channels
        self.s_init = s_init
        self.special_init = special_init
        widths = [channels, hidden, hidden, hidden]
        self.convs = [Conv2d(widths[i], hidden, 3, rng=rng) for i in range(3)]
        self.norms = [InstanceNorm2d(hidden) for _ in range(3)]
        last_bias = special_bias_init(s_init) if special_init else 0.0
        self.last = Conv2d(hidden, channels, 3, rng=rng, gain=1.0, bias_value=last_bias)

    def pixel_gates(self, f_b: Tensor) -> Tensor:
        """Per-pixel gate map [N, C, H, W] in (0, 1)."""
        if f_b.ndim != 4 or f_b.shape[1] != self.channels:
            raise ValueError(f"gate module expects [N, {self.channels}, H, W], got {f_b.shape}")
        x = f_b
        for conv, norm in zip(self.convs, self.norms):
            x = ag.relu(norm(conv(x)))
        return ag.sigmoid(self.last(x))

    def forward(self, f_b: Tensor) -> Tensor:
        return global_avg_pool(self.pixel_gates(f_b))


def cgm_forward(f_b: Tensor, net: ChannelGateModule) -> Tensor:
    return net(f_b)


@dataclass
class DisentangledPair:
    f_di: Tensor
    f_ds: Tensor


def split(f_b: Tensor, s_di) -> DisentangledPair:
    """Gate each channel: ``f_di = f_b * s``, ``f_ds = f_b * (1 - s)``."""
    s_di = s_di if isinstance(s_di, Tensor) else Tensor(np.asarray(s_di, dtype=f_b.dtype))
    if f_b.ndim != 4:
        raise ValueError(f"split expects f_b of shape [N, C, H, W], got {f_b.shape}")
    n, c = f_b.shape[:2]
    if s_di.shape not in ((n, c), (c,)):
        raise ValueError(f"gate shape {s_di.shape} does not match features {f_b.shape}")
    s = ag.reshape(s_di, (-1, c, 1, 1))
    # Two subtractions instead of f_b * (1 - s): by Sterbenz one of them is exact,
    # so f_di + f_ds == f_b holds bit for bit. f_di is within one ulp of f_b * s.
    f_ds = f_b - f_b * s
    f_di = f_b - f_ds
    return DisentangledPair(f_di, f_ds)


def gate_loss(s_di: Tensor, margin: float = GATE_MARGIN) -> Tensor:
    """Hinge on the gate's self inner product ``max(s.(1-s) - m, 0)``, averaged over the batch."""
    s = s_di if s_di.ndim == 2 else ag.reshape(s_di, (1, -1))
    inner = ag.sum(s * (1.0 - s), axis=1)
    return ag.mean(ag.maximum(inner - margin, 0.0))
