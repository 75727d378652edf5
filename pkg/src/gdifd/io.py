"""File formats: YAML configs, npz checkpoints, JSON-lines streams, gate dumps.

Config file schema (YAML, every key optional)::

    train:        # any TrainConfig field, e.g.
      seed: 0
      stage1_iters: 800
      use_gate_loss: true
    benchmark:    # any BenchmarkConfig field; styles by preset name or mapping
      sources: [warm_flat, cool_stripes]
      unseen: green_speckle
      n_train: 160

Checkpoints are ``.npz`` archives holding every parameter under its dotted
name plus a ``__meta__`` entry: JSON with ``format``, ``version``, the train
config and the benchmark config.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, fields, is_dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import yaml

__all__ = [
    "CHECKPOINT_FORMAT",
    "CHECKPOINT_VERSION",
    "load_config_file",
    "save_config_file",
    "save_checkpoint",
    "load_checkpoint",
    "write_jsonl",
    "read_jsonl",
    "write_csv",
    "write_gate_csv",
    "write_gate_pgm",
    "read_pgm",
    "write_detections_jsonl",
    "save_png",
]

CHECKPOINT_FORMAT = "gdifd-checkpoint"
CHECKPOINT_VERSION = 1


def _plain(obj):
    if is_dataclass(obj):
        return _plain(asdict(obj))
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def load_config_file(path) -> dict:
    """Read a YAML (or JSON) config into ``{"train": {...}, "benchmark": {...}}``."""
    text = Path(path).read_text()
    data = yaml.safe_load(text) or {}
    if not isinstance(data, dict):
        raise ValueError(f"{path}: config must be a mapping")
    unknown = set(data) - {"train", "benchmark", "grid"}
    if unknown:
        raise ValueError(f"{path}: unknown top-level keys {sorted(unknown)}")
    return {"train": dict(data.get("train") or {}), "benchmark": dict(data.get("benchmark") or {}), **(
        {"grid": data["grid"]} if "grid" in data else {}
    )}


def save_config_file(path, train=None, benchmark=None, **extra) -> None:
    doc = {}
    if train is not None:
        doc["train"] = _plain(train)
    if benchmark is not None:
        doc["benchmark"] = _plain(benchmark)
    doc.update(_plain(extra))
    Path(path).write_text(yaml.safe_dump(doc, sort_keys=False))


def check_keys(cls, values: Mapping, where: str) -> None:
    names = {f.name for f in fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ValueError(f"{where}: unknown keys {sorted(unknown)}; allowed: {sorted(names)}")


def save_checkpoint(path, state: Mapping[str, np.ndarray], train_config, benchmark_config=None, extra=None) -> None:
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "train_config": _plain(train_config),
        "benchmark_config": _plain(benchmark_config),
        "extra": _plain(extra or {}),
    }
    arrays = {f"param/{k}": np.asarray(v) for k, v in state.items()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta)), **arrays)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(path, allow_pickle=False) as archive:
        if "__meta__" not in archive:
            raise ValueError(f"{path}: not a checkpoint (missing __meta__)")
        meta = json.loads(str(archive["__meta__"]))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: unexpected format {meta.get('format')!r}")
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')}")
        state = {k[len("param/") :]: archive[k].copy() for k in archive.files if k.startswith("param/")}
    return state, meta


def write_jsonl(path, records: Iterable) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(_plain(rec)) + "\n")


def read_jsonl(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_csv(path, rows: Sequence[Mapping]) -> None:
    rows = [_plain(r) for r in rows]
    header: list[str] = []
    for r in rows:
        header += [k for k in r if k not in header]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=header)
        writer.writeheader()
        for r in rows:
            writer.writerow({k: json.dumps(v) if isinstance(v, (dict, list)) else v for k, v in r.items()})


def write_gate_csv(path, gates: Mapping[int, np.ndarray]) -> None:
    """One row per level: ``level, c0, c1, ...``."""
    levels = sorted(gates)
    width = len(np.asarray(gates[levels[0]]).reshape(-1))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["level"] + [f"c{i}" for i in range(width)])
        for level in levels:
            writer.writerow([level] + [f"{v:.8f}" for v in np.asarray(gates[level]).reshape(-1)])


def write_gate_pgm(path, gates: Mapping[int, np.ndarray], cell: int = 8) -> None:
    """Binary 8-bit PGM: one strip per level, one ``cell``-wide square per channel.

    Black is a gate of 0 (domain-specific channel), white a gate of 1.
    """
    levels = sorted(gates)
    rows = np.stack([np.asarray(gates[l], dtype=np.float64).reshape(-1) for l in levels])
    pixels = np.clip(np.round(rows * 255.0), 0, 255).astype(np.uint8)
    pixels = np.kron(pixels, np.ones((cell, cell), dtype=np.uint8))
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    # header is four whitespace-separated tokens, then exactly one whitespace byte
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM supported")
    pixels = data[pos + 1 : pos + 1 + w * h]
    if len(pixels) != w * h:
        raise ValueError(f"{path}: truncated pixel data")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w)


def write_detections_jsonl(path, image_ids: Sequence, detections: Sequence) -> None:
    with open(path, "w") as fh:
        for image_id, det in zip(image_ids, detections):
            fh.write(json.dumps({"image_id": _plain(image_id), **det.to_dict()}) + "\n")


def save_png(path, image: np.ndarray, boxes: np.ndarray | None = None) -> None:
    """Write a [3, H, W] image in [0, 1] as PNG, optionally outlining boxes."""
    from PIL import Image, ImageDraw

    arr = np.clip(np.round(np.transpose(image, (1, 2, 0)) * 255.0), 0, 255).astype(np.uint8)
    img = Image.fromarray(arr)
    if boxes is not None and len(boxes):
        draw = ImageDraw.Draw(img)
        for x1, y1, x2, y2 in np.asarray(boxes).reshape(-1, 4):
            draw.rectangle([x1, y1, x2 - 1, y2 - 1], outline=(255, 255, 0))
    img.save(path)
