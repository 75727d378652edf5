"""Multi-source training loop plus evaluation and ablation helpers."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .detector.boxes import GroundTruth
from .detector.losses import centerness_bce, focal_loss, iou_loss
from .detector.metrics import map_at_05
from .detector.postprocess import detect
from .detector.targets import LEVELS, LevelTargets, assign_targets
from .domain import domain_adv_loss, domain_cls_loss
from .gating import gate_loss
from .model import GDIFDModel
from .nn import SGD
from .synthdata import Benchmark, BenchmarkConfig, DetectionSample

logger = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "Batch",
    "LossTerms",
    "MetricsRecord",
    "TrainResult",
    "make_batch",
    "build_model",
    "learning_rate",
    "total_loss",
    "train",
    "fit_sources",
    "extract",
    "evaluate",
    "COMPONENT_GRID",
    "GATE_INIT_GRID",
    "run_cell",
    "ablate",
]

TERMS = ("cls", "ctr", "reg", "d_adv", "d_cls", "gate")
BINARY_TOL = 0.05


@dataclass
class TrainConfig:
    lambda_d_adv: float = 0.1
    lambda_d_cls: float = 0.01
    lambda_gate: float = 0.1
    s_init: float = 0.9999
    lambda_grl: float = 0.01
    gate_margin: float = 0.01
    batch_per_domain: int = 4
    momentum: float = 0.9
    weight_decay: float = 1e-4
    warmup_iters: int = 100
    warmup_factor: float = 0.01
    stage1_lr: float = 0.005
    stage1_iters: int = 800
    stage2_lr: float | None = None
    stage2_iters: int = 400
    seed: int = 0
    channels: int = 16
    use_dsrl: bool = True
    use_dirl: bool = True
    use_gate_loss: bool = True
    use_special_init: bool = True
    log_interval: int = 25
    score_thresh: float = 0.05
    nms_iou: float = 0.6
    probe_samples: int = 64

    def __post_init__(self):
        if self.batch_per_domain < 1:
            raise ValueError("batch_per_domain must be positive")
        if not 0.0 < self.s_init < 1.0:
            raise ValueError("s_init must lie in (0, 1)")
        if min(self.warmup_iters, self.stage1_iters, self.stage2_iters) < 0:
            raise ValueError("iteration counts must be non-negative")

    @property
    def stage2_rate(self) -> float:
        return self.stage1_lr / 10.0 if self.stage2_lr is None else self.stage2_lr

    @property
    def total_iters(self) -> int:
        return self.warmup_iters + self.stage1_iters + self.stage2_iters

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown TrainConfig keys {sorted(unknown)}")
        return cls(**d)


def learning_rate(config: TrainConfig, iteration: int) -> float:
    """Linear warm-up from ``warmup_factor * lr`` to ``lr``, then two constant stages."""
    if iteration < config.warmup_iters:
        frac = iteration / config.warmup_iters
        return config.stage1_lr * (config.warmup_factor + (1.0 - config.warmup_factor) * frac)
    if iteration < config.warmup_iters + config.stage1_iters:
        return config.stage1_lr
    return config.stage2_rate


# -- batches ---------------------------------------------------------------
@dataclass
class Batch:
    images: np.ndarray  # [N, 3, H, W]
    targets: dict[int, LevelTargets]  # stacked over the batch
    domain: int
    gts: list[GroundTruth] = field(default_factory=list)


def sample_targets(gt: GroundTruth, image_shape: tuple[int, int]) -> dict[int, LevelTargets]:
    h, w = image_shape
    return {l: assign_targets(gt, l, (h // 2**l, w // 2**l)) for l in LEVELS}


def make_batch(samples: Sequence[DetectionSample], cache: dict | None = None) -> Batch:
    """Stack samples of a single domain; targets are memoized in ``cache`` by seed/domain."""
    if not samples:
        raise ValueError("empty batch")
    domains = {s.domain for s in samples}
    if len(domains) != 1:
        raise ValueError(f"batch mixes domains {sorted(domains)}; each step uses exactly one source domain")
    size = samples[0].image.shape[-2:]
    per_sample = []
    for s in samples:
        key = (s.seed, s.domain)
        if cache is not None and key in cache:
            per_sample.append(cache[key])
            continue
        t = sample_targets(s.gt, size)
        if cache is not None:
            cache[key] = t
        per_sample.append(t)
    targets = {l: LevelTargets.stack([t[l] for t in per_sample]) for l in LEVELS}
    images = np.stack([s.image for s in samples]).astype(np.float64)
    return Batch(images, targets, domains.pop(), [s.gt for s in samples])


# -- objective -------------------------------------------------------------
@dataclass
class LossTerms:
    total: Tensor
    terms: dict[int, dict[str, float]]
    gates: dict[int, np.ndarray]

    @property
    def total_value(self) -> float:
        return float(self.total.data)

    def term_sum(self, config: TrainConfig) -> float:
        """Total recomputed from the logged per-level terms."""
        out = 0.0
        for level in sorted(self.terms):
            t = self.terms[level]
            out += (
                t["cls"]
                + t["ctr"]
                + t["reg"]
                + config.lambda_d_adv * t["d_adv"]
                + config.lambda_d_cls * t["d_cls"]
                + config.lambda_gate * t["gate"]
            )
        return out


def build_model(config: TrainConfig, num_classes: int, num_domains: int) -> GDIFDModel:
    return GDIFDModel(
        num_classes=num_classes,
        num_domains=num_domains,
        channels=config.channels,
        s_init=config.s_init,
        special_init=config.use_special_init,
        lambda_grl=config.lambda_grl,
        gated=config.use_dsrl,
        seed=config.seed,
    )


def total_loss(batch, model: GDIFDModel, config: TrainConfig) -> LossTerms:
    """Sum over levels of detection loss plus the weighted domain and gate terms.

    Disabled terms are left out of the graph entirely and logged as 0.
    """
    if not isinstance(batch, Batch):
        batch = make_batch(batch)
    outputs = model(Tensor(batch.images))
    num_pos = sum(batch.targets[l].num_positive for l in LEVELS)
    use_cls = config.use_dsrl and model.gated and config.lambda_d_cls != 0
    use_gate = config.use_dsrl and model.gated and config.use_gate_loss and config.lambda_gate != 0
    use_adv = config.use_dirl and config.lambda_d_adv != 0
    total = None
    terms: dict[int, dict[str, float]] = {}
    gates: dict[int, np.ndarray] = {}
    for level in LEVELS:
        out = outputs[level]
        tgt = batch.targets[level]
        idx = model.level_index(level)
        parts = {
            "cls": focal_loss(out.head.cls_map, tgt, normalizer=num_pos),
            "ctr": centerness_bce(out.head.ctr_map, tgt, normalizer=num_pos),
            "reg": iou_loss(out.head.reg_map, tgt, normalizer=num_pos),
        }
        level_total = parts["cls"] + parts["ctr"] + parts["reg"]
        if use_adv:
            parts["d_adv"] = domain_adv_loss(out.f_di, batch.domain, model.discriminators[idx])
            level_total = level_total + config.lambda_d_adv * parts["d_adv"]
        if use_cls:
            parts["d_cls"] = domain_cls_loss(out.f_ds, batch.domain, model.classifiers[idx])
            level_total = level_total + config.lambda_d_cls * parts["d_cls"]
        if use_gate:
            parts["gate"] = gate_loss(out.s_di, config.gate_margin)
            level_total = level_total + config.lambda_gate * parts["gate"]
        total = level_total if total is None else total + level_total
        terms[level] = {k: float(parts[k].data) if k in parts else 0.0 for k in TERMS}
        if out.s_di is not None:
            gates[level] = out.s_di.data.copy()
    return LossTerms(total, terms, gates)


# -- training --------------------------------------------------------------
@dataclass
class MetricsRecord:
    iteration: int
    lr: float
    total: float
    terms: dict[int, dict[str, float]]
    gate_binarization: float | None
    elapsed: float
    # filled only by an evaluation pass, not by periodic training records
    dsr_probe: float | None = None
    dir_probe: float | None = None
    map_unseen: float | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["terms"] = {str(k): v for k, v in self.terms.items()}
        return d


@dataclass
class TrainResult:
    model: GDIFDModel
    records: list[MetricsRecord]
    config: TrainConfig
    steps: int


def binarization_fraction(gates: Iterable[np.ndarray], tol: float = BINARY_TOL) -> float:
    vals = np.concatenate([np.asarray(g).reshape(-1) for g in gates])
    if vals.size == 0:
        return float("nan")
    return float(np.mean(np.minimum(vals, 1.0 - vals) <= tol))


class _DomainSampler:
    """Cycles through one domain's samples in reshuffled epochs."""

    def __init__(self, samples: Sequence[DetectionSample], rng: np.random.Generator):
        self.samples = list(samples)
        self.rng = rng
        self.order: list[int] = []

    def take(self, n: int) -> list[DetectionSample]:
        out = []
        while len(out) < n:
            if not self.order:
                self.order = list(self.rng.permutation(len(self.samples)))
            out.append(self.samples[self.order.pop()])
        return out


def train(
    config: TrainConfig,
    benchmark: Benchmark,
    on_record: Callable[[MetricsRecord], None] | None = None,
    on_step: Callable[[int, int, LossTerms], None] | None = None,
) -> TrainResult:
    """Round-robin over source domains, one optimizer step per domain per iteration."""
    return fit_sources(config, benchmark.train, benchmark.config.num_classes, on_record, on_step)


def fit_sources(
    config: TrainConfig,
    sources: dict[int, Sequence[DetectionSample]],
    num_classes: int,
    on_record: Callable[[MetricsRecord], None] | None = None,
    on_step: Callable[[int, int, LossTerms], None] | None = None,
) -> TrainResult:
    """:func:`train` on explicit per-domain sample lists keyed ``0 .. M-1``."""
    m = len(sources)
    if sorted(sources) != list(range(m)):
        raise ValueError(f"source domains must be keyed 0..{m - 1}, got {sorted(sources)}")
    model = build_model(config, num_classes, m)
    params = model.trainable_parameters(config.use_dsrl, config.use_dirl)
    opt = SGD(params, lr=learning_rate(config, 0), momentum=config.momentum, weight_decay=config.weight_decay)
    rng = np.random.default_rng([config.seed, 7])
    samplers = [_DomainSampler(sources[d], rng) for d in range(m)]
    cache: dict = {}
    records: list[MetricsRecord] = []
    start = time.perf_counter()
    steps = 0
    for it in range(config.total_iters):
        opt.lr = learning_rate(config, it)
        iter_terms = []
        for d in range(m):
            batch = make_batch(samplers[d].take(config.batch_per_domain), cache)
            result = total_loss(batch, model, config)
            if not np.isfinite(result.total_value):
                raise FloatingPointError(f"loss diverged at iteration {it}, domain {d}: {result.total_value}")
            opt.zero_grad()
            ag.backward(result.total)
            opt.step()
            steps += 1
            iter_terms.append(result)
            if on_step is not None:
                on_step(it, d, result)
        last = it == config.total_iters - 1
        if config.log_interval and (it % config.log_interval == 0 or last):
            rec = _record(it, opt.lr, iter_terms, time.perf_counter() - start)
            records.append(rec)
            logger.info("iter %d lr %.5f loss %.4f", it, rec.lr, rec.total)
            if on_record is not None:
                on_record(rec)
    return TrainResult(model, records, config, steps)


def _record(it: int, lr: float, results: list[LossTerms], elapsed: float) -> MetricsRecord:
    k = len(results)
    terms = {
        level: {name: sum(r.terms[level][name] for r in results) / k for name in TERMS} for level in LEVELS
    }
    total = sum(r.total_value for r in results) / k
    gates = [g for r in results for g in r.gates.values()]
    return MetricsRecord(it, lr, total, terms, binarization_fraction(gates) if gates else None, elapsed)


# -- evaluation ------------------------------------------------------------
@dataclass
class Extracted:
    gates: dict[int, np.ndarray]  # level -> [N, C]
    pooled_di: np.ndarray  # [N, levels * C]
    pooled_ds: np.ndarray
    detections: list
    orthogonality: np.ndarray  # per-location <f_di, f_ds> / |f_b|^2


def extract(model: GDIFDModel, images: np.ndarray, config: TrainConfig, batch_size: int = 16) -> Extracted:
    """Frozen forward pass; everything the evaluation needs comes out of one sweep."""
    gates = {l: [] for l in LEVELS}
    di, ds, dets, ortho = [], [], [], []
    size = images.shape[-2:]
    with ag.no_grad():
        for start in range(0, len(images), batch_size):
            chunk = images[start : start + batch_size]
            outs = model(Tensor(chunk))
            di.append(np.concatenate([outs[l].f_di.data.mean(axis=(2, 3)) for l in LEVELS], axis=1))
            if model.gated:
                ds.append(np.concatenate([outs[l].f_ds.data.mean(axis=(2, 3)) for l in LEVELS], axis=1))
                for l in LEVELS:
                    gates[l].append(outs[l].s_di.data)
                    fb, fdi, fds = outs[l].f_b.data, outs[l].f_di.data, outs[l].f_ds.data
                    norm = (fb**2).sum(axis=1)
                    inner = (fdi * fds).sum(axis=1)
                    ok = norm > 1e-12
                    ortho.append((inner[ok] / norm[ok]).reshape(-1))
            else:
                ds.append(np.zeros_like(di[-1]))
            dets.extend(
                detect(
                    {l: outs[l].head for l in LEVELS},
                    score_thresh=config.score_thresh,
                    nms_iou=config.nms_iou,
                    image_size=size,
                )
            )
    return Extracted(
        {l: np.concatenate(v) for l, v in gates.items() if v},
        np.concatenate(di),
        np.concatenate(ds),
        dets,
        np.concatenate(ortho) if ortho else np.zeros(0),
    )


def probe_accuracy(train_x, train_y, test_x, test_y) -> float:
    """Standardized logistic-regression probe fitted on train, scored on test."""
    from sklearn.linear_model import LogisticRegression
    from sklearn.pipeline import make_pipeline
    from sklearn.preprocessing import StandardScaler

    if np.allclose(train_x, train_x[:1]):
        # constant features carry nothing: predict the majority class
        majority = np.bincount(train_y).argmax()
        return float(np.mean(test_y == majority))
    probe = make_pipeline(StandardScaler(), LogisticRegression(max_iter=5000))
    probe.fit(train_x, train_y)
    return float(probe.score(test_x, test_y))


def gate_statistics(gates: dict[int, np.ndarray]) -> dict:
    if not gates:
        return {"binarization": None, "near_zero_channels": None, "mean_gate": None}
    mean_per_level = {l: g.mean(axis=0) for l, g in gates.items()}
    return {
        "binarization": binarization_fraction(gates.values()),
        "near_zero_channels": int(sum(int(np.sum(v < BINARY_TOL)) for v in mean_per_level.values())),
        "mean_gate": float(np.mean([g.mean() for g in gates.values()])),
        "level_means": {int(l): v.tolist() for l, v in mean_per_level.items()},
    }


def evaluate(model: GDIFDModel, benchmark: Benchmark, config: TrainConfig, splits: Sequence[str] = ("test",)) -> dict:
    """mAP@0.5 on each requested split, plus domain probes on the pooled features.

    Probes are fitted on pooled features of source training images and scored
    on the held-out source validation images.
    """
    m = benchmark.num_sources
    result: dict = {"num_sources": m, "chance": 1.0 / m}
    for name in splits:
        samples = benchmark.split(name)
        images, gts, _ = Benchmark.arrays(samples)
        ex = extract(model, images, config)
        result[f"map_{name}"] = map_at_05(ex.detections, gts, benchmark.config.num_classes)["map"]
    probe_train = [s for d in range(m) for s in benchmark.train[d][: config.probe_samples]]
    probe_test = benchmark.split("val")
    xtr, _, ytr = Benchmark.arrays(probe_train)
    xte, _, yte = Benchmark.arrays(probe_test)
    ex_tr = extract(model, xtr, config)
    ex_te = extract(model, xte, config)
    result["dsr_probe"] = probe_accuracy(ex_tr.pooled_ds, ytr, ex_te.pooled_ds, yte)
    result["dir_probe"] = probe_accuracy(ex_tr.pooled_di, ytr, ex_te.pooled_di, yte)
    result["gates"] = gate_statistics(ex_te.gates)
    if ex_te.orthogonality.size:
        result["orthogonality_fraction"] = float(np.mean(ex_te.orthogonality < 0.05))
        result["orthogonality_max"] = float(ex_te.orthogonality.max())
    else:
        result["orthogonality_fraction"] = None
        result["orthogonality_max"] = None
    return result


# -- ablation --------------------------------------------------------------
COMPONENT_GRID = [
    {"name": "base", "use_dsrl": False, "use_dirl": False},
    {"name": "dsrl", "use_dsrl": True, "use_dirl": False},
    {"name": "dirl", "use_dsrl": False, "use_dirl": True},
    {"name": "gdifd", "use_dsrl": True, "use_dirl": True},
]

GATE_INIT_GRID = [
    {"name": "gate+si", "use_gate_loss": True, "use_special_init": True},
    {"name": "gate", "use_gate_loss": True, "use_special_init": False},
    {"name": "si", "use_gate_loss": False, "use_special_init": True},
    {"name": "none", "use_gate_loss": False, "use_special_init": False},
]

CACHE_VERSION = 1


def cell_key(config: TrainConfig, bench: BenchmarkConfig) -> str:
    blob = json.dumps({"v": CACHE_VERSION, "train": config.to_dict(), "bench": bench.to_dict()}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def run_cell(
    config: TrainConfig,
    bench: BenchmarkConfig | Benchmark,
    cache_dir=None,
    splits: Sequence[str] = ("test", "val"),
) -> dict:
    """Train and evaluate one configuration; results are memoized under ``cache_dir``."""
    benchmark = bench if isinstance(bench, Benchmark) else None
    bench_config = benchmark.config if benchmark is not None else bench
    key = cell_key(config, bench_config)
    path = Path(cache_dir) / f"{key}.json" if cache_dir is not None else None
    if path is not None and path.exists():
        return json.loads(path.read_text())
    if benchmark is None:
        from .synthdata import make_splits

        benchmark = make_splits(bench_config)
    t0 = time.perf_counter()
    trained = train(config, benchmark)
    metrics = evaluate(trained.model, benchmark, config, splits=splits)
    out = {
        "key": key,
        "config": config.to_dict(),
        "metrics": metrics,
        "train_seconds": time.perf_counter() - t0,
        "final_record": trained.records[-1].to_dict() if trained.records else None,
    }
    # same shape whether fresh or read back from the cache
    out = json.loads(json.dumps(out))
    if path is not None:
        from .io import save_checkpoint

        path.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(path.with_suffix(".npz"), trained.model.state_dict(), config, bench_config)
        path.write_text(json.dumps(out, indent=1))
    return out


def ablate(
    base: TrainConfig,
    bench: BenchmarkConfig | Benchmark,
    grid: Sequence[dict],
    seeds: Sequence[int] = (0,),
    cache_dir=None,
) -> list[dict]:
    """One train+evaluate per (cell, seed); rows carry the cell's full config."""
    rows = []
    for cell in grid:
        overrides = {k: v for k, v in cell.items() if k != "name"}
        for seed in seeds:
            cfg = replace(base, seed=seed, **overrides)
            res = run_cell(cfg, bench, cache_dir=cache_dir)
            met = res["metrics"]
            rows.append(
                {
                    "cell": cell.get("name", json.dumps(overrides, sort_keys=True)),
                    "seed": seed,
                    "map_test": met.get("map_test"),
                    "map_val": met.get("map_val"),
                    "dsr_probe": met["dsr_probe"],
                    "dir_probe": met["dir_probe"],
                    "binarization": met["gates"]["binarization"],
                    "near_zero_channels": met["gates"]["near_zero_channels"],
                    "config": res["config"],
                }
            )
    return rows
