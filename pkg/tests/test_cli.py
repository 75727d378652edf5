import csv
import json
import subprocess
import sys

import numpy as np
import pytest
import yaml

from gdifd.cli import main
from gdifd.io import load_checkpoint, read_jsonl, read_pgm

TRAIN = {"channels": 4, "batch_per_domain": 2, "warmup_iters": 1, "stage1_iters": 2, "stage2_iters": 1, "log_interval": 2}
BENCH = {"n_train": 4, "n_val": 4, "n_test": 2}


@pytest.fixture(scope="module")
def config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.yaml"
    path.write_text(yaml.safe_dump({"train": TRAIN, "benchmark": BENCH}))
    return path


@pytest.fixture(scope="module")
def run(config, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--config", str(config), "--out", str(out), "--seed", "1"]) == 0
    return out


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "gdifd", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for name in ("gradcheck", "gen", "train", "eval", "ablate", "dump-gates"):
        assert name in proc.stdout


def test_gradcheck_subset(capsys):
    assert main(["gradcheck", "--instances", "2", "--case", "sigmoid", "--case", "gate_loss"]) == 0
    out = capsys.readouterr().out
    assert "2/2 cases passed" in out


def test_gen(config, tmp_path):
    assert main(["gen", "--config", str(config), "--out", str(tmp_path), "--png", "1"]) == 0
    with np.load(tmp_path / "train.npz") as arch:
        assert arch["images"].shape == (8, 3, 128, 128)
        assert arch["domains"].tolist() == [0] * 4 + [1] * 4
    gts = read_jsonl(tmp_path / "test_gt.jsonl")
    assert len(gts) == 2 and {g["domain"] for g in gts} == {2}
    assert yaml.safe_load((tmp_path / "benchmark.yaml").read_text())["benchmark"]["n_train"] == 4
    assert len(list((tmp_path / "previews").glob("*.png"))) == 3


def test_train_outputs(run):
    records = read_jsonl(run / "metrics.jsonl")
    assert [r["iteration"] for r in records] == [0, 2, 3, 3]
    final = records[-1]
    assert final["map_unseen"] is not None and final["dsr_probe"] is not None
    state, meta = load_checkpoint(run / "checkpoint.npz")
    assert meta["train_config"]["seed"] == 1 and meta["train_config"]["channels"] == 4
    assert meta["benchmark_config"]["n_train"] == 4
    assert meta["extra"]["steps"] == 8
    with open(run / "summary.csv") as fh:
        (row,) = list(csv.DictReader(fh))
    assert row["steps"] == "8" and json.loads(row["config"])["seed"] == 1


def test_unknown_config_key_rejected(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump({"train": {"lamda_gate": 0.1}}))
    with pytest.raises(ValueError, match="lamda_gate"):
        main(["train", "--config", str(bad), "--out", str(tmp_path / "o")])


def test_eval(run, tmp_path, capsys):
    assert main(["eval", "--checkpoint", str(run / "checkpoint.npz"), "--split", "val", "--out", str(tmp_path)]) == 0
    metrics = json.loads((tmp_path / "metrics.json").read_text())
    assert "map_val" in metrics and "dir_probe" in metrics
    dets = read_jsonl(tmp_path / "detections_val.jsonl")
    assert len(dets) == 8 and set(dets[0]) == {"image_id", "boxes", "classes", "scores"}


def test_dump_gates(run, tmp_path):
    argv = ["dump-gates", "--checkpoint", str(run / "checkpoint.npz"), "--domain", "1", "--out", str(tmp_path), "--cell", "2"]
    assert main(argv) == 0
    img = read_pgm(tmp_path / "gates.pgm")
    assert img.shape == (5 * 2, 4 * 2)
    with open(tmp_path / "gates.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["level", "c0", "c1", "c2", "c3"] and len(rows) == 6
    assert np.allclose(np.array(rows[1][1:], dtype=float) * 255, img[0, ::2], atol=0.5)


def test_dump_gates_refuses_ungated(config, tmp_path):
    out = tmp_path / "run"
    assert main(["train", "--config", str(config), "--out", str(out), "--no-use-dsrl"]) == 0
    with pytest.raises(SystemExit, match="without the gate"):
        main(["dump-gates", "--checkpoint", str(out / "checkpoint.npz"), "--out", str(tmp_path / "g")])


def test_ablate_custom_grid(tmp_path):
    grid = tmp_path / "grid.yaml"
    cells = [{"name": "full"}, {"name": "no-gate", "use_gate_loss": False}]
    grid.write_text(yaml.safe_dump({"train": TRAIN, "benchmark": BENCH, "grid": cells}))
    out = tmp_path / "out"
    argv = ["ablate", "--grid", str(grid), "--out", str(out), "--seeds", "0", "1", "--cache", str(tmp_path / "cache")]
    assert main(argv) == 0
    rows = read_jsonl(out / "results.jsonl")
    assert [(r["cell"], r["seed"]) for r in rows] == [("full", 0), ("full", 1), ("no-gate", 0), ("no-gate", 1)]
    assert rows[2]["config"]["use_gate_loss"] is False
    assert len(list((tmp_path / "cache").glob("*.npz"))) == 4
    with open(out / "summary.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 4


def test_ablate_rejects_unknown_grid(tmp_path):
    grid = tmp_path / "grid.yaml"
    grid.write_text(yaml.safe_dump({"grid": "nonsense"}))
    with pytest.raises(SystemExit, match="nonsense"):
        main(["ablate", "--grid", str(grid), "--out", str(tmp_path)])
