"""Layers and an SGD optimizer on top of :mod:`gdifd.autograd`."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import autograd as ag
from .autograd import Tensor

__all__ = [
    "Module",
    "Sequential",
    "Conv2d",
    "InstanceNorm2d",
    "ReLU",
    "Sigmoid",
    "conv2d",
    "instance_norm",
    "relu",
    "sigmoid",
    "softmax_channels",
    "global_avg_pool",
    "special_bias_init",
    "SGD",
]

IN_EPS = 1e-5


def special_bias_init(s_init: float) -> float:
    """Bias that makes a sigmoid output ``s_init`` when its other inputs are ~0."""
    if not 0.0 < s_init < 1.0:
        raise ValueError(f"s_init must lie in (0, 1), got {s_init}")
    return -math.log((1.0 - s_init) / s_init)


# -- functional kernels ----------------------------------------------------
def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an NCHW input with an (out, in, k, k) kernel."""
    if x.ndim != 4:
        raise ValueError(f"conv2d expects NCHW input, got shape {x.shape}")
    c_out, c_in, kh, kw = weight.shape
    if x.shape[1] != c_in:
        raise ValueError(f"conv2d: input has {x.shape[1]} channels, kernel expects {c_in}")
    n, _, h, w = x.shape
    p, s = padding, stride
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    hp, wp = xp.shape[2], xp.shape[3]
    if hp < kh or wp < kw:
        raise ValueError(f"conv2d: padded input {hp}x{wp} smaller than kernel {kh}x{kw}")
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]
    ho, wo = win.shape[2], win.shape[3]
    wd = weight.data
    out = np.einsum("nchwij,ocij->nohw", win, wd, optimize=True)
    if bias is not None:
        out += bias.data.reshape(1, -1, 1, 1)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def grad_fn(g):
        gx = gw = gb = None
        if weight.requires_grad:
            gw = np.einsum("nchwij,nohw->ocij", win, g, optimize=True)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            dcols = np.einsum("nohw,ocij->ncijhw", g, wd, optimize=True)
            gxp = np.zeros((n, c_in, hp, wp), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + s * ho : s, j : j + s * wo : s] += dcols[:, :, i, j]
            gx = gxp[:, :, p : p + h, p : p + w] if p else gxp
        return (gx, gw) if bias is None else (gx, gw, gb)

    return ag._make(out, parents, grad_fn, "conv2d")


def instance_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None, eps: float = IN_EPS) -> Tensor:
    """Normalize each (sample, channel) map over its spatial positions."""
    if x.ndim != 4:
        raise ValueError(f"instance_norm expects NCHW input, got shape {x.shape}")
    xd = x.data
    mu = xd.mean(axis=(2, 3), keepdims=True)
    centered = xd - mu
    var = (centered**2).mean(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat
    if gamma is not None:
        out = out * gamma.data.reshape(1, -1, 1, 1)
    if beta is not None:
        out = out + beta.data.reshape(1, -1, 1, 1)
    parents = [x]
    if gamma is not None:
        parents.append(gamma)
    if beta is not None:
        parents.append(beta)

    def grad_fn(g):
        grads = []
        gxhat = g * gamma.data.reshape(1, -1, 1, 1) if gamma is not None else g
        gx = inv * (
            gxhat - gxhat.mean(axis=(2, 3), keepdims=True) - xhat * (gxhat * xhat).mean(axis=(2, 3), keepdims=True)
        )
        grads.append(gx)
        if gamma is not None:
            grads.append((g * xhat).sum(axis=(0, 2, 3)))
        if beta is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return ag._make(out, tuple(parents), grad_fn, "instance_norm")


def relu(x: Tensor) -> Tensor:
    return ag.relu(x)


def sigmoid(x: Tensor) -> Tensor:
    return ag.sigmoid(x)


def softmax_channels(x: Tensor) -> Tensor:
    """Softmax across axis 1 of an [N, M, H, W] map."""
    return ag.softmax(x, axis=1)


def global_avg_pool(x: Tensor) -> Tensor:
    """[N, C, H, W] -> [N, C] spatial mean."""
    if x.ndim != 4:
        raise ValueError(f"global_avg_pool expects NCHW input, got shape {x.shape}")
    return ag.mean(x, axis=(2, 3))


# -- modules ---------------------------------------------------------------
class Module:
    """Parameter container with recursive discovery of sub-modules."""

    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=p.dtype)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} does not match {p.shape}")
            p.data = arr.copy()


class Sequential(Module):
    def __init__(self, *layers: Module):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


class Conv2d(Module):
    """Convolution with fan-in scaled uniform weights and zero bias."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int = 3,
        stride: int = 1,
        padding: int | None = None,
        rng: np.random.Generator | None = None,
        gain: float = math.sqrt(2.0),
        bias_value: float = 0.0,
    ):
        rng = np.random.default_rng() if rng is None else rng
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = kernel_size // 2 if padding is None else padding
        fan_in = in_channels * kernel_size * kernel_size
        bound = gain * math.sqrt(3.0 / fan_in)
        self.weight = Tensor(
            rng.uniform(-bound, bound, size=(out_channels, in_channels, kernel_size, kernel_size)),
            requires_grad=True,
        )
        self.bias = Tensor(np.full(out_channels, float(bias_value)), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)

    def __repr__(self) -> str:
        return (
            f"Conv2d({self.in_channels}, {self.out_channels}, k={self.kernel_size}, "
            f"stride={self.stride}, padding={self.padding})"
        )


class InstanceNorm2d(Module):
    def __init__(self, channels: int, eps: float = IN_EPS):
        self.eps = eps
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return instance_norm(x, self.gamma, self.beta, self.eps)


class ReLU(Module):
    def forward(self, x: Tensor) -> Tensor:
        return ag.relu(x)


class Sigmoid(Module):
    def forward(self, x: Tensor) -> Tensor:
        return ag.sigmoid(x)


# -- optimizer -------------------------------------------------------------
class SGD:
    """SGD with heavy-ball momentum and L2 weight decay folded into the gradient.

    ``v <- momentum * v + (grad + weight_decay * w)``, then ``w <- w - lr * v``.
    """

    def __init__(self, params, lr: float, momentum: float = 0.9, weight_decay: float = 1e-4):
        self.params = list(params)
        if len({id(p) for p in self.params}) != len(self.params):
            raise ValueError("parameter list contains duplicates")
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise ValueError(f"parameter {i} with shape {p.shape} has no gradient")
        for p, v in zip(self.params, self.velocity):
            v *= self.momentum
            v += p.grad + self.weight_decay * p.data
            p.data = p.data - self.lr * v

    def state_dict(self) -> dict:
        return {"lr": self.lr, "velocity": [v.copy() for v in self.velocity]}
