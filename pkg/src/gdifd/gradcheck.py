"""Finite-difference gradient checks for every differentiable operation in the package.

Each case builds a scalar function of some tensors from a random generator.
:func:`check_gradients` perturbs those tensors in place with central
differences and compares against the reverse-mode gradients. The relative
error of a tensor is ``|analytic - numeric| / max(|analytic|, |numeric|)``
in the Euclidean norm; a pair of (near) zero gradients counts as exact.

Composites built from relu/max/min are only piecewise smooth, and a central
difference whose stencil touches a kink measures neither one-sided slope (a
dead relu fed by a zero bias sits exactly on one). Each coordinate therefore
also gets the second difference ``f(x+h) + f(x-h) - 2 f(x)`` at ``h`` and
``h/2``: on a smooth stretch it scales as ``h**2`` (ratio 4), next to a kink it
scales linearly. Such coordinates are dropped and counted. A genuine backward
bug is still caught, since the function is smooth where it is compared.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .detector.backbone import BackboneFPN
from .detector.boxes import GroundTruth
from .detector.head import FCOSHead
from .detector.losses import centerness_bce, focal_loss, iou_loss
from .detector.targets import LevelTargets, assign_targets
from .domain import DomainClassifier, domain_xent
from .gating import ChannelGateModule, gate_loss, split
from .nn import conv2d, global_avg_pool, instance_norm

__all__ = ["relative_error", "check_gradients", "KinkError", "CASES", "CaseResult", "run_suite"]

TOLERANCE = 1e-4
KINK_TOLERANCE = 1e-12
MAX_KINK_FRACTION = 0.25


class KinkError(RuntimeError):
    """Too many coordinates straddle a non-differentiable point to trust the check."""


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-10) -> float:
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale < floor:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)


def check_gradients(
    fn: Callable[[], Tensor],
    tensors: list[Tensor],
    step: float = 1e-5,
    max_elements: int | None = None,
    rng: np.random.Generator | None = None,
    stats: dict | None = None,
) -> float:
    """Largest relative error over ``tensors`` between backward and central differences.

    ``stats``, when given, receives ``checked`` and ``kinks`` counts.
    """
    for t in tensors:
        t.grad = None
    out = fn()
    ag.backward(out)
    worst = 0.0
    checked = kinks = 0
    rng = np.random.default_rng(0) if rng is None else rng

    def evaluate(flat, i, h):
        orig = flat[i]
        flat[i] = orig + h
        hi = float(fn().data)
        flat[i] = orig - h
        lo = float(fn().data)
        flat[i] = orig
        return hi, lo

    for t in tensors:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            idx = np.sort(rng.choice(flat.size, size=max_elements, replace=False))
        numeric = np.empty(len(idx))
        smooth = np.ones(len(idx), dtype=bool)
        with ag.no_grad():
            base = float(fn().data)
            for k, i in enumerate(idx):
                hi, lo = evaluate(flat, i, step)
                hi2, lo2 = evaluate(flat, i, step / 2.0)
                numeric[k] = (hi - lo) / (2.0 * step)
                curvature = (hi + lo - 2.0 * base) - 4.0 * (hi2 + lo2 - 2.0 * base)
                smooth[k] = abs(curvature) <= KINK_TOLERANCE * max(1.0, abs(base))
        checked += len(idx)
        kinks += int((~smooth).sum())
        worst = max(worst, relative_error(analytic.reshape(-1)[idx][smooth], numeric[smooth]))
    if stats is not None:
        stats["checked"] = stats.get("checked", 0) + checked
        stats["kinks"] = stats.get("kinks", 0) + kinks
    if checked and kinks > MAX_KINK_FRACTION * checked:
        raise KinkError(f"{kinks} of {checked} coordinates straddle a kink")
    return worst


def _t(arr) -> Tensor:
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True)


def _project(out: Tensor, rng) -> Tensor:
    # random projection so symmetric outputs cannot hide a wrong gradient
    weights = rng.normal(size=out.shape)
    return ag.sum(out * weights)


def _shape(rng, max_c=4, max_hw=8):
    return (int(rng.integers(1, 3)), int(rng.integers(1, max_c + 1)), int(rng.integers(2, max_hw + 1)), int(rng.integers(2, max_hw + 1)))


# -- cases: each returns (fn, tensors, max_elements) -----------------------
def _case_add(rng):
    a, b = _t(rng.normal(size=(2, 3, 4, 4))), _t(rng.normal(size=(3, 1, 1)))
    return lambda: _project(a + b, np.random.default_rng(1)), [a, b], None


def _case_sub(rng):
    a, b = _t(rng.normal(size=(3, 4))), _t(rng.normal(size=(4,)))
    return lambda: _project(a - b, np.random.default_rng(1)), [a, b], None


def _case_mul(rng):
    a, b = _t(rng.normal(size=(2, 3, 4, 4))), _t(rng.normal(size=(2, 3, 1, 1)))
    return lambda: _project(a * b, np.random.default_rng(1)), [a, b], None


def _case_div(rng):
    a, b = _t(rng.normal(size=(3, 4))), _t(rng.uniform(0.5, 2.0, size=(3, 4)) * rng.choice([-1, 1], size=(3, 4)))
    return lambda: _project(a / b, np.random.default_rng(1)), [a, b], None


def _case_neg_scalar(rng):
    a = _t(rng.normal(size=(5,)))
    return lambda: _project(-(a * 2.5) + 1.0, np.random.default_rng(1)), [a], None


def _case_power(rng):
    a = _t(rng.uniform(0.3, 2.0, size=(6,)))
    p = float(rng.uniform(0.5, 3.0))
    return lambda: _project(ag.power(a, p), np.random.default_rng(1)), [a], None


def _case_exp(rng):
    a = _t(rng.normal(size=(6,)))
    return lambda: _project(ag.exp(a), np.random.default_rng(1)), [a], None


def _case_log(rng):
    a = _t(rng.uniform(0.2, 3.0, size=(6,)))
    return lambda: _project(ag.log(a), np.random.default_rng(1)), [a], None


def _case_sigmoid(rng):
    a = _t(rng.normal(scale=3.0, size=(8,)))
    return lambda: _project(ag.sigmoid(a), np.random.default_rng(1)), [a], None


def _case_relu(rng):
    a = _t(rng.normal(size=(8,)))
    return lambda: _project(ag.relu(a), np.random.default_rng(1)), [a], None


def _case_maximum(rng):
    a = _t(rng.normal(size=(8,)))
    c = float(rng.normal())
    return lambda: _project(ag.maximum(a, c), np.random.default_rng(1)), [a], None


def _case_minimum(rng):
    a, b = _t(rng.normal(size=(8,))), _t(rng.normal(size=(8,)))
    return lambda: _project(ag.minimum(a, b), np.random.default_rng(1)), [a, b], None


def _case_sum_mean(rng):
    a = _t(rng.normal(size=(2, 3, 4)))
    return (
        lambda: _project(ag.sum(a, axis=1), np.random.default_rng(1))
        + _project(ag.mean(a, axis=(0, 2), keepdims=True), np.random.default_rng(2))
        + ag.mean(a),
        [a],
        None,
    )


def _case_reshape_transpose(rng):
    a = _t(rng.normal(size=(2, 3, 4)))
    return lambda: _project(ag.transpose(ag.reshape(a, (6, 4)), (1, 0)), np.random.default_rng(1)), [a], None


def _case_concat(rng):
    a, b = _t(rng.normal(size=(2, 3))), _t(rng.normal(size=(2, 5)))
    return lambda: _project(ag.concat([a, b], axis=1), np.random.default_rng(1)), [a, b], None


def _case_getitem(rng):
    a = _t(rng.normal(size=(4, 5)))
    mask = rng.random((4, 5)) > 0.4
    rows = rng.integers(0, 4, size=6)
    return (
        lambda: _project(a[1:3, ::2], np.random.default_rng(1))
        + _project(a[mask], np.random.default_rng(2))
        + _project(a[rows], np.random.default_rng(3)),
        [a],
        None,
    )


def _case_softmax(rng):
    a = _t(rng.normal(size=(2, 3, 2, 2)))
    return lambda: _project(ag.softmax(a, axis=1), np.random.default_rng(1)), [a], None


def _case_upsample(rng):
    a = _t(rng.normal(size=(1, 2, 3, 3)))
    return lambda: _project(ag.upsample_nearest(a, 2), np.random.default_rng(1)), [a], None


def _case_conv2d(rng):
    n, c, h, w = _shape(rng)
    k = int(rng.choice([1, 3]))
    stride = int(rng.choice([1, 2]))
    pad = int(rng.integers(0, 2)) if k == 3 else 0
    h, w = max(h, k), max(w, k)
    x = _t(rng.normal(size=(n, c, h, w)))
    wt = _t(rng.normal(size=(int(rng.integers(1, 5)), c, k, k)))
    b = _t(rng.normal(size=wt.shape[0]))
    return lambda: _project(conv2d(x, wt, b, stride=stride, padding=pad), np.random.default_rng(1)), [x, wt, b], None


def _case_instance_norm(rng):
    n, c, h, w = _shape(rng)
    x = _t(rng.normal(size=(n, c, h, w)) * rng.uniform(0.5, 3))
    g, b = _t(rng.normal(size=c)), _t(rng.normal(size=c))
    return lambda: _project(instance_norm(x, g, b), np.random.default_rng(1)), [x, g, b], None


def _case_global_pool(rng):
    x = _t(rng.normal(size=_shape(rng)))
    return lambda: _project(global_avg_pool(x), np.random.default_rng(1)), [x], None


def _case_cgm(rng):
    c = int(rng.integers(2, 5))
    net = ChannelGateModule(c, s_init=float(rng.uniform(0.2, 0.8)), rng=rng)
    x = _t(rng.normal(size=(2, c, 4, 4)))
    params = net.parameters()
    return lambda: _project(net(x), np.random.default_rng(1)), [x] + params, None


def _case_split(rng):
    fb = _t(rng.normal(size=(2, 3, 3, 3)))
    s = _t(rng.uniform(0.05, 0.95, size=(2, 3)))

    def fn():
        pair = split(fb, s)
        return _project(pair.f_di, np.random.default_rng(1)) + _project(pair.f_ds, np.random.default_rng(2))

    return fn, [fb, s], None


def _case_gate_loss(rng):
    # inner product well above the margin so the hinge is active
    s = _t(rng.uniform(0.2, 0.8, size=(3, 4)))
    return lambda: gate_loss(s, 0.01), [s], None


def _case_domain_xent(rng):
    c, m = 3, int(rng.integers(2, 4))
    clf = DomainClassifier(c, m, rng=rng)
    x = _t(rng.normal(size=(2, c, 3, 3)))
    label = int(rng.integers(m))
    return lambda: domain_xent(x, label, clf), [x] + clf.parameters(), None


def _random_targets(rng, n, h, w, k):
    cls = np.where(rng.random((n, h, w)) < 0.4, rng.integers(0, k, size=(n, h, w)), -1)
    ltrb = rng.uniform(1.0, 10.0, size=(n, h, w, 4)) * (cls >= 0)[..., None]
    ctr = rng.uniform(0.05, 0.95, size=(n, h, w)) * (cls >= 0)
    cls[0, 0, 0] = 0
    ltrb[0, 0, 0] = rng.uniform(1.0, 10.0, size=4)
    ctr[0, 0, 0] = 0.5
    return LevelTargets(cls, ltrb, ctr)


def _case_focal(rng):
    n, k, h, w = 2, int(rng.integers(1, 4)), 3, 3
    tgt = _random_targets(rng, n, h, w, k)
    z = _t(rng.normal(size=(n, k, h, w)))
    gamma = float(rng.choice([0.0, 1.0, 2.0]))
    return lambda: focal_loss(ag.sigmoid(z), tgt, gamma=gamma), [z], None


def _case_centerness(rng):
    tgt = _random_targets(rng, 2, 3, 3, 2)
    z = _t(rng.normal(size=(2, 1, 3, 3)))
    return lambda: centerness_bce(ag.sigmoid(z), tgt), [z], None


def _case_iou(rng):
    tgt = _random_targets(rng, 2, 3, 3, 2)
    z = _t(rng.normal(size=(2, 4, 3, 3)))
    # offset so predicted and target sides never tie exactly
    return lambda: iou_loss(ag.exp(z) * 4.0 + 0.013, tgt), [z], None


def _case_head(rng):
    head = FCOSHead(3, 2, tower=1, rng=rng)
    x = _t(rng.normal(size=(1, 3, 3, 3)))

    def fn():
        out = head(x, 8)
        return (
            _project(out.cls_map, np.random.default_rng(1))
            + _project(out.ctr_map, np.random.default_rng(2))
            + _project(out.reg_map * 0.1, np.random.default_rng(3))
        )

    return fn, [x] + head.parameters(), None


def _case_backbone(rng):
    net = BackboneFPN(channels=3, stem=2, rng=rng)
    img = _t(rng.uniform(size=(1, 3, 128, 128)))

    def fn():
        feats = net(img)
        return sum((_project(feats[l], np.random.default_rng(l)) for l in feats), Tensor(0.0))

    return fn, [img] + net.parameters(), 12


def _case_detection_losses(rng):
    gt = GroundTruth([[20.0, 20.0, 44.0, 40.0], [60.0, 10.0, 75.0, 30.0]], [0, 1])
    tgt = {l: LevelTargets.stack([assign_targets(gt, l, (128 // 2**l, 128 // 2**l))]) for l in (3, 4)}
    head = FCOSHead(2, 2, tower=1, rng=rng)
    # off the rare-class prior: with p ~ 0.01 the focal terms of negatives are
    # so flat that float roundoff in the loss swamps their differences
    head.out.bias.data[:] = 0.0
    head.out.weight.data *= 5.0
    feats = {l: _t(rng.normal(size=(1, 2, 128 // 2**l, 128 // 2**l))) for l in (3, 4)}
    npos = sum(t.num_positive for t in tgt.values())

    def fn():
        total = Tensor(0.0)
        for l in (3, 4):
            out = head(feats[l], 2**l)
            total = total + focal_loss(out.cls_map, tgt[l], normalizer=npos)
            total = total + centerness_bce(out.ctr_map, tgt[l], normalizer=npos)
            total = total + iou_loss(out.reg_map, tgt[l], normalizer=npos)
        return total

    return fn, list(feats.values()) + head.parameters(), 40


CASES: dict[str, Callable] = {
    "add": _case_add,
    "sub": _case_sub,
    "mul": _case_mul,
    "div": _case_div,
    "neg_scale": _case_neg_scalar,
    "power": _case_power,
    "exp": _case_exp,
    "log": _case_log,
    "sigmoid": _case_sigmoid,
    "relu": _case_relu,
    "maximum": _case_maximum,
    "minimum": _case_minimum,
    "sum_mean": _case_sum_mean,
    "reshape_transpose": _case_reshape_transpose,
    "concat": _case_concat,
    "getitem": _case_getitem,
    "softmax": _case_softmax,
    "upsample": _case_upsample,
    "conv2d": _case_conv2d,
    "instance_norm": _case_instance_norm,
    "global_avg_pool": _case_global_pool,
    "cgm": _case_cgm,
    "split": _case_split,
    "gate_loss": _case_gate_loss,
    "domain_xent": _case_domain_xent,
    "focal_loss": _case_focal,
    "centerness_bce": _case_centerness,
    "iou_loss": _case_iou,
    "fcos_head": _case_head,
    "backbone_fpn": _case_backbone,
    "detection_losses": _case_detection_losses,
}


@dataclass
class CaseResult:
    name: str
    instances: int
    max_error: float
    seconds: float
    checked: int = 0
    kinks: int = 0

    @property
    def passed(self) -> bool:
        return self.max_error < TOLERANCE


def run_suite(instances: int = 20, seed: int = 0, names=None, step: float = 1e-5) -> list[CaseResult]:
    results = []
    for name in names or CASES:
        builder = CASES[name]
        t0 = time.perf_counter()
        worst = 0.0
        stats: dict = {}
        for i in range(instances):
            rng = np.random.default_rng([seed, i, sum(map(ord, name))])
            fn, tensors, max_elements = builder(rng)
            worst = max(worst, check_gradients(fn, tensors, step=step, max_elements=max_elements, rng=rng, stats=stats))
        results.append(CaseResult(name, instances, worst, time.perf_counter() - t0, stats.get("checked", 0), stats.get("kinks", 0)))
    return results
