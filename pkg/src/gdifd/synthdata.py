"""Deterministic multi-domain detection benchmark made of simple shapes.

Object geometry (classes, sizes, positions, colours) depends only on the
sample seed. The domain only changes global rendering style: background,
texture, tint and sensor noise. The same seed rendered in two domains
therefore has the same boxes and different pixels.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .detector.boxes import GroundTruth, box_iou
from .domain import DomainLabel

__all__ = [
    "SHAPES",
    "TEXTURES",
    "DomainStyle",
    "STYLE_PRESETS",
    "BenchmarkConfig",
    "DetectionSample",
    "SeedRange",
    "Benchmark",
    "generate_sample",
    "make_splits",
    "style_separability",
]

SHAPES = ("disc", "square", "triangle")
TEXTURES = ("flat", "stripes", "speckle")


@dataclass(frozen=True)
class DomainStyle:
    name: str
    background: tuple[float, float, float] = (0.4, 0.4, 0.4)
    background_jitter: float = 0.03
    texture: str = "flat"
    texture_strength: float = 0.0
    tint: tuple[float, float, float] = (0.0, 0.0, 0.0)
    noise_sigma: float = 0.02

    def __post_init__(self):
        if self.texture not in TEXTURES:
            raise ValueError(f"texture must be one of {TEXTURES}, got {self.texture!r}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        object.__setattr__(self, "background", tuple(float(v) for v in self.background))
        object.__setattr__(self, "tint", tuple(float(v) for v in self.tint))


STYLE_PRESETS = {
    "warm_flat": DomainStyle("warm_flat", (0.38, 0.34, 0.30), 0.03, "flat", 0.0, (0.10, 0.02, -0.08), 0.02),
    "cool_stripes": DomainStyle("cool_stripes", (0.30, 0.36, 0.42), 0.03, "stripes", 0.10, (-0.08, 0.0, 0.10), 0.03),
    "dusk_speckle": DomainStyle("dusk_speckle", (0.22, 0.22, 0.26), 0.03, "speckle", 0.12, (0.0, -0.04, 0.06), 0.04),
    "haze_flat": DomainStyle("haze_flat", (0.52, 0.52, 0.50), 0.03, "flat", 0.0, (0.0, 0.0, 0.0), 0.05),
    "green_speckle": DomainStyle("green_speckle", (0.28, 0.34, 0.26), 0.03, "speckle", 0.14, (-0.06, 0.10, -0.06), 0.05),
    "magenta_stripes": DomainStyle("magenta_stripes", (0.36, 0.28, 0.36), 0.03, "stripes", 0.12, (0.08, -0.06, 0.08), 0.03),
}


@dataclass
class BenchmarkConfig:
    """Everything needed to regenerate a benchmark bit for bit."""

    image_size: int = 128
    num_classes: int = 2
    min_objects: int = 1
    max_objects: int = 5
    min_size: int = 12
    max_size: int = 96
    sources: list[DomainStyle] = field(
        default_factory=lambda: [STYLE_PRESETS["warm_flat"], STYLE_PRESETS["cool_stripes"]]
    )
    unseen: DomainStyle = field(default_factory=lambda: STYLE_PRESETS["green_speckle"])
    n_train: int = 160
    n_val: int = 48
    n_test: int = 64
    seed: int = 0

    def __post_init__(self):
        self.sources = [s if isinstance(s, DomainStyle) else _style_from(s) for s in self.sources]
        if not isinstance(self.unseen, DomainStyle):
            self.unseen = _style_from(self.unseen)
        self.validate()

    def validate(self) -> None:
        if self.num_classes < 1:
            raise ValueError("benchmark needs at least one object class")
        if self.num_classes > len(SHAPES):
            raise ValueError(f"at most {len(SHAPES)} shape classes are available, got {self.num_classes}")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValueError("need 1 <= min_objects <= max_objects")
        if not 4 <= self.min_size <= self.max_size <= self.image_size:
            raise ValueError("need 4 <= min_size <= max_size <= image_size")
        if len(self.sources) < 2:
            raise ValueError(f"need at least 2 source domains, got {len(self.sources)}")

    @property
    def num_sources(self) -> int:
        return len(self.sources)

    @property
    def styles(self) -> list[DomainStyle]:
        """Source styles followed by the unseen style (index ``num_sources``)."""
        return [*self.sources, self.unseen]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BenchmarkConfig":
        d = dict(d)
        return cls(**d)


def _style_from(preset) -> DomainStyle:
    if isinstance(preset, str):
        if preset not in STYLE_PRESETS:
            raise ValueError(f"unknown style preset {preset!r}; known: {sorted(STYLE_PRESETS)}")
        return STYLE_PRESETS[preset]
    if isinstance(preset, dict):
        return DomainStyle(**preset)
    raise TypeError(f"cannot build a DomainStyle from {type(preset).__name__}")


@dataclass
class DetectionSample:
    image: np.ndarray  # [3, H, W] float32 in [0, 1]
    gt: GroundTruth
    domain: int
    seed: int


# -- geometry --------------------------------------------------------------
def _layout(config: BenchmarkConfig, seed: int):
    rng = np.random.default_rng([config.seed, seed, 0])
    size = config.image_size
    count = int(rng.integers(config.min_objects, config.max_objects + 1))
    boxes, classes, colours = [], [], []
    attempts = 0
    while len(boxes) < count and attempts < 50 * count:
        attempts += 1
        side = float(np.exp(rng.uniform(np.log(config.min_size), np.log(config.max_size))))
        aspect = float(np.exp(rng.uniform(-0.25, 0.25)))
        w = int(np.clip(round(side * aspect), config.min_size, size))
        h = int(np.clip(round(side / aspect), config.min_size, size))
        x1 = int(rng.integers(0, size - w + 1))
        y1 = int(rng.integers(0, size - h + 1))
        box = np.array([x1, y1, x1 + w, y1 + h], dtype=np.float64)
        if boxes and box_iou(box, np.array(boxes)).max() > 0.3:
            continue
        boxes.append(box)
        classes.append(int(rng.integers(config.num_classes)))
        colours.append(rng.uniform(0.62, 0.95, size=3))
    return np.array(boxes).reshape(-1, 4), np.array(classes, dtype=np.int64), colours


def _shape_mask(shape: str, box: np.ndarray, size: int) -> np.ndarray:
    x1, y1, x2, y2 = (int(v) for v in box)
    yy, xx = np.mgrid[y1:y2, x1:x2]
    px, py = xx + 0.5, yy + 0.5
    if shape == "square":
        local = np.ones_like(px, dtype=bool)
    elif shape == "disc":
        cx, cy, rx, ry = (x1 + x2) / 2, (y1 + y2) / 2, (x2 - x1) / 2, (y2 - y1) / 2
        local = ((px - cx) / rx) ** 2 + ((py - cy) / ry) ** 2 <= 1.0
    else:  # triangle, apex at top centre
        cx = (x1 + x2) / 2
        half = (x2 - x1) / 2 * (py - y1) / (y2 - y1)
        local = np.abs(px - cx) <= half + 0.5
    mask = np.zeros((size, size), dtype=bool)
    mask[y1:y2, x1:x2] = local
    return mask


# -- style -----------------------------------------------------------------
def _background(style: DomainStyle, size: int, rng: np.random.Generator) -> np.ndarray:
    base = np.asarray(style.background) + rng.normal(0.0, style.background_jitter, size=3)
    img = np.broadcast_to(base[:, None, None], (3, size, size)).copy()
    if style.texture == "stripes":
        theta = rng.uniform(0, np.pi)
        period = rng.uniform(6.0, 14.0)
        phase = rng.uniform(0, 2 * np.pi)
        yy, xx = np.mgrid[0:size, 0:size]
        wave = np.sin(2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / period + phase)
        img += style.texture_strength * wave[None]
    elif style.texture == "speckle":
        coarse = rng.normal(0.0, 1.0, size=(size // 2, size // 2))
        img += style.texture_strength * np.kron(coarse, np.ones((2, 2)))[None]
    return img


def generate_sample(config: BenchmarkConfig, domain_index: int, seed: int) -> DetectionSample:
    """Render sample ``seed`` in style ``domain_index`` (``num_sources`` is the unseen style)."""
    config.validate()
    styles = config.styles
    if not 0 <= domain_index < len(styles):
        raise ValueError(f"domain index {domain_index} outside [0, {len(styles)})")
    style = styles[domain_index]
    size = config.image_size
    boxes, classes, colours = _layout(config, seed)
    rng = np.random.default_rng([config.seed, seed, 1, domain_index])
    img = _background(style, size, rng)
    for box, cls, colour in zip(boxes, classes, colours):
        mask = _shape_mask(SHAPES[cls], box, size)
        img[:, mask] = colour[:, None]
    img += np.asarray(style.tint)[:, None, None]
    if style.noise_sigma > 0:
        img += rng.normal(0.0, style.noise_sigma, size=img.shape)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return DetectionSample(img, GroundTruth(boxes, classes), domain_index, seed)


# -- splits ----------------------------------------------------------------
@dataclass(frozen=True)
class SeedRange:
    start: int
    count: int

    @property
    def stop(self) -> int:
        return self.start + self.count

    def overlaps(self, other: "SeedRange") -> bool:
        return self.start < other.stop and other.start < self.stop

    def __iter__(self):
        return iter(range(self.start, self.stop))


@dataclass
class Benchmark:
    """Generated splits. Train/val are keyed by source domain index."""

    config: BenchmarkConfig
    train: dict[int, list[DetectionSample]]
    val: dict[int, list[DetectionSample]]
    test: list[DetectionSample]
    seed_ranges: dict[str, SeedRange]

    @property
    def num_sources(self) -> int:
        return self.config.num_sources

    def split(self, name: str) -> list[DetectionSample]:
        """Flat sample list of ``train``, ``val`` or ``test``."""
        if name == "test":
            return list(self.test)
        parts = {"train": self.train, "val": self.val}.get(name)
        if parts is None:
            raise ValueError(f"unknown split {name!r}; expected train, val or test")
        return [s for d in sorted(parts) for s in parts[d]]

    @staticmethod
    def arrays(samples: Sequence[DetectionSample]):
        """``(images [N,3,H,W] float64, ground truths, domain indices)``."""
        if not samples:
            raise ValueError("empty split")
        images = np.stack([s.image for s in samples]).astype(np.float64)
        return images, [s.gt for s in samples], np.array([s.domain for s in samples], dtype=np.int64)

    def domain_label(self, domain: int) -> DomainLabel:
        return DomainLabel(domain, self.num_sources)


def split_seed_ranges(config: BenchmarkConfig) -> dict[str, SeedRange]:
    ranges = {}
    cursor = 0
    for d in range(config.num_sources):
        ranges[f"train/{d}"] = SeedRange(cursor, config.n_train)
        cursor += config.n_train
    for d in range(config.num_sources):
        ranges[f"val/{d}"] = SeedRange(cursor, config.n_val)
        cursor += config.n_val
    ranges["test"] = SeedRange(cursor, config.n_test)
    return ranges


def check_disjoint(ranges: dict[str, SeedRange]) -> None:
    items = sorted(ranges.items())
    for i, (na, a) in enumerate(items):
        for nb, b in items[i + 1 :]:
            if a.overlaps(b):
                raise ValueError(f"seed ranges {na} {a} and {nb} {b} overlap")


def make_splits(config: BenchmarkConfig, seed_ranges: dict[str, SeedRange] | None = None) -> Benchmark:
    """Per-source train and validation sets plus a test set in the unseen style."""
    config.validate()
    ranges = split_seed_ranges(config) if seed_ranges is None else dict(seed_ranges)
    check_disjoint(ranges)
    m = config.num_sources
    train = {d: [generate_sample(config, d, s) for s in ranges[f"train/{d}"]] for d in range(m)}
    val = {d: [generate_sample(config, d, s) for s in ranges[f"val/{d}"]] for d in range(m)}
    test = [generate_sample(config, m, s) for s in ranges["test"]]
    return Benchmark(config, train, val, test, ranges)


def style_separability(benchmark: Benchmark, pool: int = 8, folds: int = 3) -> dict[tuple[int, int], float]:
    """Cross-validated linear-probe accuracy on pooled raw pixels for each source pair."""
    from sklearn.linear_model import LogisticRegression
    from sklearn.model_selection import cross_val_score
    from sklearn.pipeline import make_pipeline
    from sklearn.preprocessing import StandardScaler

    def features(samples):
        imgs = np.stack([s.image for s in samples]).astype(np.float64)
        n, c, h, w = imgs.shape
        return imgs.reshape(n, c, h // pool, pool, w // pool, pool).mean(axis=(3, 5)).reshape(n, -1)

    out = {}
    m = benchmark.num_sources
    for a in range(m):
        for b in range(a + 1, m):
            xa, xb = features(benchmark.train[a]), features(benchmark.train[b])
            x = np.concatenate([xa, xb])
            y = np.r_[np.zeros(len(xa)), np.ones(len(xb))]
            probe = make_pipeline(StandardScaler(), LogisticRegression(max_iter=2000))
            out[(a, b)] = float(cross_val_score(probe, x, y, cv=folds).mean())
    return out
