"""scikit-learn style wrapper around the gated detector."""

from __future__ import annotations

from dataclasses import fields

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .detector.metrics import map_at_05
from .harness import TrainConfig, build_model, extract, fit_sources
from .synthdata import DetectionSample
from .validation import check_domains, check_ground_truths, check_images

__all__ = ["GDIFDDetector"]

_CONFIG_FIELDS = tuple(f.name for f in fields(TrainConfig))


class GDIFDDetector(BaseEstimator):
    """Multi-source detector with channel-gated feature disentanglement.

    ``fit`` takes images ``[N, 3, H, W]``, one ground truth per image and an
    integer source-domain label per image. Constructor arguments mirror
    :class:`~gdifd.harness.TrainConfig`; ``num_classes`` is inferred from the
    labels when left as ``None``.

    Fitted attributes: ``model_``, ``n_domains_``, ``n_classes_``, ``history_``.
    """

    def __init__(
        self,
        num_classes=None,
        lambda_d_adv=0.1,
        lambda_d_cls=0.01,
        lambda_gate=0.1,
        s_init=0.9999,
        lambda_grl=0.01,
        gate_margin=0.01,
        batch_per_domain=4,
        momentum=0.9,
        weight_decay=1e-4,
        warmup_iters=100,
        warmup_factor=0.01,
        stage1_lr=0.005,
        stage1_iters=800,
        stage2_lr=None,
        stage2_iters=400,
        seed=0,
        channels=16,
        use_dsrl=True,
        use_dirl=True,
        use_gate_loss=True,
        use_special_init=True,
        log_interval=25,
        score_thresh=0.05,
        nms_iou=0.6,
        probe_samples=64,
    ):
        self.num_classes = num_classes
        self.lambda_d_adv = lambda_d_adv
        self.lambda_d_cls = lambda_d_cls
        self.lambda_gate = lambda_gate
        self.s_init = s_init
        self.lambda_grl = lambda_grl
        self.gate_margin = gate_margin
        self.batch_per_domain = batch_per_domain
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.warmup_iters = warmup_iters
        self.warmup_factor = warmup_factor
        self.stage1_lr = stage1_lr
        self.stage1_iters = stage1_iters
        self.stage2_lr = stage2_lr
        self.stage2_iters = stage2_iters
        self.seed = seed
        self.channels = channels
        self.use_dsrl = use_dsrl
        self.use_dirl = use_dirl
        self.use_gate_loss = use_gate_loss
        self.use_special_init = use_special_init
        self.log_interval = log_interval
        self.score_thresh = score_thresh
        self.nms_iou = nms_iou
        self.probe_samples = probe_samples

    def train_config(self) -> TrainConfig:
        return TrainConfig(**{name: getattr(self, name) for name in _CONFIG_FIELDS})

    def fit(self, X, y, domains):
        images = check_images(X)
        gts = check_ground_truths(y, len(images), images.shape[2:])
        labels, m = check_domains(domains, len(images))
        present = max((int(g.classes.max()) + 1 for g in gts if len(g)), default=0)
        k = present if self.num_classes is None else int(self.num_classes)
        if k < 1 or present > k:
            raise ValueError(f"num_classes={self.num_classes} but labels reach class {present - 1}")
        config = self.train_config()
        sources = {d: [] for d in range(m)}
        for i, (img, gt, d) in enumerate(zip(images, gts, labels)):
            sources[int(d)].append(DetectionSample(img, gt, int(d), i))
        result = fit_sources(config, sources, k)
        self.model_ = result.model
        self.n_domains_ = m
        self.n_classes_ = k
        self.history_ = result.records
        return self

    def _extract(self, X):
        check_is_fitted(self, "model_")
        images = check_images(X)
        return extract(self.model_, images, self.train_config())

    def predict(self, X):
        """One :class:`~gdifd.detector.Detection` per image."""
        return self._extract(X).detections

    def transform(self, X) -> np.ndarray:
        """Globally pooled domain-invariant features, ``[N, 5 * channels]``."""
        return self._extract(X).pooled_di

    def transform_specific(self, X) -> np.ndarray:
        """Pooled domain-specific features; zeros when the gate is bypassed."""
        return self._extract(X).pooled_ds

    def gate_signals(self, X) -> dict[int, np.ndarray]:
        """Per-level gate values ``{level: [N, channels]}``."""
        return self._extract(X).gates

    def score(self, X, y) -> float:
        """mAP@0.5 of :meth:`predict` against ``y``."""
        dets = self.predict(X)
        gts = check_ground_truths(y, len(dets))
        return float(map_at_05(dets, gts, self.n_classes_)["map"])

    # -- persistence ------------------------------------------------------
    def save(self, path, benchmark_config=None) -> None:
        from .io import save_checkpoint

        check_is_fitted(self, "model_")
        extra = {"num_classes": self.n_classes_, "num_domains": self.n_domains_}
        save_checkpoint(path, self.model_.state_dict(), self.train_config(), benchmark_config, extra)

    @classmethod
    def load(cls, path) -> "GDIFDDetector":
        from .io import load_checkpoint

        state, meta = load_checkpoint(path)
        est = cls(**meta["train_config"])
        extra = meta.get("extra") or {}
        bench = meta.get("benchmark_config") or {}
        k = extra.get("num_classes", bench.get("num_classes"))
        m = extra.get("num_domains", len(bench.get("sources", ())))
        if not k or not m:
            raise ValueError(f"{path}: checkpoint does not record class and domain counts")
        est.model_ = build_model(est.train_config(), k, m)
        est.model_.load_state_dict(state)
        est.n_classes_, est.n_domains_, est.history_ = k, m, []
        return est
