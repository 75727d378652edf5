"""Command line entry point: ``gdifd <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import io
from .harness import COMPONENT_GRID, GATE_INIT_GRID, TrainConfig, ablate, build_model, evaluate, extract, train
from .synthdata import Benchmark, BenchmarkConfig, make_splits

log = logging.getLogger("gdifd")

GRIDS = {"components": COMPONENT_GRID, "gate-init": GATE_INIT_GRID}


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_train_overrides(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("TrainConfig overrides (take precedence over the config file)")
    for f in fields(TrainConfig):
        default = f.default
        if isinstance(default, bool):
            group.add_argument(_flag(f.name), dest=f.name, action=argparse.BooleanOptionalAction, default=None)
        elif f.name == "stage2_lr" or isinstance(default, float):
            group.add_argument(_flag(f.name), dest=f.name, type=float, default=None, metavar="X")
        else:
            group.add_argument(_flag(f.name), dest=f.name, type=int, default=None, metavar="N")


def _train_overrides(args) -> dict:
    return {f.name: getattr(args, f.name) for f in fields(TrainConfig) if getattr(args, f.name, None) is not None}


def _load_configs(path) -> tuple[dict, dict, dict]:
    if path is None:
        return {}, {}, {}
    doc = io.load_config_file(path)
    io.check_keys(TrainConfig, doc["train"], f"{path}: train")
    io.check_keys(BenchmarkConfig, doc["benchmark"], f"{path}: benchmark")
    return doc["train"], doc["benchmark"], doc


def _benchmark_from_checkpoint(meta: dict, config_path) -> BenchmarkConfig:
    if config_path is not None:
        return BenchmarkConfig.from_dict(_load_configs(config_path)[1])
    if not meta.get("benchmark_config"):
        raise SystemExit("checkpoint carries no benchmark config; pass --config")
    return BenchmarkConfig.from_dict(meta["benchmark_config"])


def _model_from_checkpoint(path, bench: BenchmarkConfig):
    state, meta = io.load_checkpoint(path)
    config = TrainConfig.from_dict(meta["train_config"])
    model = build_model(config, bench.num_classes, bench.num_sources)
    model.load_state_dict(state)
    return model, config, meta


# -- subcommands -----------------------------------------------------------
def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    results = run_suite(instances=args.instances, seed=args.seed, names=args.case or None)
    width = max(len(r.name) for r in results)
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.name:<{width}}  {r.max_error:9.2e}  {r.seconds:6.1f}s  kinks {r.kinks}/{r.checked}  {status}")
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} cases passed, {sum(r.seconds for r in results):.1f}s")
    return 1 if failed else 0


def cmd_gen(args) -> int:
    _, bench_dict, _ = _load_configs(args.config)
    if args.seed is not None:
        bench_dict["seed"] = args.seed
    bench = make_splits(BenchmarkConfig.from_dict(bench_dict))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.save_config_file(out / "benchmark.yaml", benchmark=bench.config)
    for name in ("train", "val", "test"):
        samples = bench.split(name)
        np.savez_compressed(
            out / f"{name}.npz",
            images=np.stack([s.image for s in samples]),
            domains=np.array([s.domain for s in samples]),
            seeds=np.array([s.seed for s in samples]),
        )
        io.write_jsonl(out / f"{name}_gt.jsonl", ({"seed": s.seed, "domain": s.domain, **s.gt.to_dict()} for s in samples))
        log.info("%s: %d images", name, len(samples))
    if args.png:
        previews = out / "previews"
        previews.mkdir(exist_ok=True)
        for d, style in enumerate(bench.config.styles):
            pool = bench.test if d == bench.num_sources else bench.train[d]
            for s in pool[: args.png]:
                io.save_png(previews / f"{style.name}_{s.seed}.png", s.image, s.gt.boxes)
    print(f"wrote benchmark to {out}")
    return 0


def cmd_train(args) -> int:
    train_dict, bench_dict, _ = _load_configs(args.config)
    config = TrainConfig.from_dict({**train_dict, **_train_overrides(args)})
    bench = make_splits(BenchmarkConfig.from_dict(bench_dict))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.save_config_file(out / "config.yaml", train=config, benchmark=bench.config)

    metrics_path = out / "metrics.jsonl"
    with open(metrics_path, "w") as stream:

        def on_record(rec):
            stream.write(json.dumps(rec.to_dict()) + "\n")
            stream.flush()

        result = train(config, bench, on_record=on_record)
        metrics = evaluate(result.model, bench, config, splits=("test", "val"))
        final = replace(
            result.records[-1],
            gate_binarization=metrics["gates"]["binarization"],
            dsr_probe=metrics["dsr_probe"],
            dir_probe=metrics["dir_probe"],
            map_unseen=metrics["map_test"],
        )
        on_record(final)

    io.save_checkpoint(out / "checkpoint.npz", result.model.state_dict(), config, bench.config, {"steps": result.steps})
    summary = {
        "iterations": config.total_iters,
        "steps": result.steps,
        "map_unseen": metrics["map_test"],
        "map_val": metrics["map_val"],
        "dsr_probe": metrics["dsr_probe"],
        "dir_probe": metrics["dir_probe"],
        "binarization": metrics["gates"]["binarization"],
        "near_zero_channels": metrics["gates"]["near_zero_channels"],
        "orthogonality_fraction": metrics["orthogonality_fraction"],
        "config": config.to_dict(),
    }
    io.write_csv(out / "summary.csv", [summary])
    print(json.dumps({k: v for k, v in summary.items() if k != "config"}, indent=1))
    return 0


def cmd_eval(args) -> int:
    _, meta = io.load_checkpoint(args.checkpoint)
    bench_config = _benchmark_from_checkpoint(meta, args.config)
    model, config, _ = _model_from_checkpoint(args.checkpoint, bench_config)
    bench = make_splits(bench_config)
    metrics = evaluate(model, bench, config, splits=(args.split,))
    print(json.dumps(metrics, indent=1))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.json").write_text(json.dumps(metrics, indent=1))
        samples = bench.split(args.split)
        images, _, _ = Benchmark.arrays(samples)
        dets = extract(model, images, config).detections
        io.write_detections_jsonl(out / f"detections_{args.split}.jsonl", [s.seed for s in samples], dets)
    return 0


def cmd_ablate(args) -> int:
    doc = io.load_config_file(args.grid)
    io.check_keys(TrainConfig, doc["train"], f"{args.grid}: train")
    grid = doc.get("grid", "components")
    if isinstance(grid, str):
        if grid not in GRIDS:
            raise SystemExit(f"unknown grid {grid!r}; use one of {sorted(GRIDS)} or a list of cells")
        grid = GRIDS[grid]
    for cell in grid:
        io.check_keys(TrainConfig, {k: v for k, v in cell.items() if k != "name"}, f"{args.grid}: grid cell")
    seeds = args.seeds if args.seeds else [0]
    base = TrainConfig.from_dict({**doc["train"], **_train_overrides(args)})
    bench = make_splits(BenchmarkConfig.from_dict(doc["benchmark"]))
    rows = ablate(base, bench, grid, seeds, cache_dir=args.cache)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.write_jsonl(out / "results.jsonl", rows)
    io.write_csv(out / "summary.csv", rows)
    for row in rows:
        print(f"{row['cell']:<10} seed {row['seed']}  mAP {row['map_test']:.4f}  dsr {row['dsr_probe']:.3f}  dir {row['dir_probe']:.3f}")
    return 0


def cmd_dump_gates(args) -> int:
    _, meta = io.load_checkpoint(args.checkpoint)
    bench_config = _benchmark_from_checkpoint(meta, args.config)
    model, config, _ = _model_from_checkpoint(args.checkpoint, bench_config)
    if not model.gated:
        raise SystemExit("model was trained without the gate module; nothing to dump")
    bench = make_splits(bench_config)
    samples = bench.split(args.split)
    if args.domain is not None:
        samples = [s for s in samples if s.domain == args.domain]
        if not samples:
            raise SystemExit(f"no {args.split} samples from domain {args.domain}")
    images, _, _ = Benchmark.arrays(samples)
    gates = {l: g.mean(axis=0) for l, g in extract(model, images, config).gates.items()}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.write_gate_csv(out / "gates.csv", gates)
    io.write_gate_pgm(out / "gates.pgm", gates, cell=args.cell)
    print(f"wrote {out / 'gates.csv'} and {out / 'gates.pgm'} ({len(images)} images)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gdifd", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--case", action="append", help="restrict to named cases (repeatable)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("gen", help="generate the synthetic benchmark")
    p.add_argument("--config", help="YAML config; only the benchmark section is used")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--png", type=int, default=0, metavar="N", help="also write N preview PNGs per domain")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train one model")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    _add_train_overrides(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--config", help="override the benchmark embedded in the checkpoint")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate every cell of a grid")
    p.add_argument("--grid", required=True, help="YAML with train/benchmark sections and a grid")
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--cache", help="memoize cells in this directory")
    _add_train_overrides(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("dump-gates", help="write mean gate signals as CSV and PGM")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="val", choices=["train", "val", "test"])
    p.add_argument("--domain", type=int)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--cell", type=int, default=8, help="PGM pixels per gate")
    p.set_defaults(func=cmd_dump_gates)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
