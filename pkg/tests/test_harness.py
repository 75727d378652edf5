import dataclasses
import math

import numpy as np
import pytest

from gdifd import harness
from gdifd.autograd import Tensor
from gdifd.detector import LEVELS, GroundTruth, HeadOutputs
from gdifd.domain import GRL_WEIGHT
from gdifd.harness import (
    COMPONENT_GRID,
    GATE_INIT_GRID,
    TrainConfig,
    ablate,
    binarization_fraction,
    build_model,
    evaluate,
    learning_rate,
    make_batch,
    run_cell,
    total_loss,
    train,
)
from gdifd.model import LevelOutputs
from gdifd.synthdata import BenchmarkConfig, DetectionSample, make_splits

TINY = dict(channels=4, batch_per_domain=2, warmup_iters=2, stage1_iters=2, stage2_iters=1, log_interval=1)


@pytest.fixture(scope="module")
def bench():
    return make_splits(BenchmarkConfig(n_train=8, n_val=8, n_test=4))


@pytest.fixture(scope="module")
def probe_bench():
    return make_splits(BenchmarkConfig(n_train=64, n_val=48, n_test=2))


# -- config and schedule ---------------------------------------------------


def test_defaults():
    c = TrainConfig()
    assert (c.lambda_d_adv, c.lambda_d_cls, c.lambda_gate, c.s_init) == (0.1, 0.01, 0.1, 0.9999)
    assert c.lambda_grl == GRL_WEIGHT == 0.01
    assert c.batch_per_domain == 4
    assert (c.momentum, c.weight_decay) == (0.9, 1e-4)
    assert (c.warmup_iters, c.stage1_iters, c.stage2_iters, c.stage1_lr) == (100, 800, 400, 0.005)
    assert c.stage2_rate == pytest.approx(0.0005, abs=1e-18)


def test_lr_schedule():
    c = TrainConfig()
    assert learning_rate(c, 0) == pytest.approx(c.stage1_lr / 100)
    assert learning_rate(c, 0) < c.stage1_lr
    assert learning_rate(c, 50) == pytest.approx(c.stage1_lr * (0.01 + 0.99 * 0.5))
    assert learning_rate(c, 100) == c.stage1_lr
    assert learning_rate(c, 899) == c.stage1_lr
    assert learning_rate(c, 900) == pytest.approx(c.stage1_lr / 10)
    assert learning_rate(c, c.total_iters - 1) == pytest.approx(c.stage1_lr / 10)


def test_warmup_is_monotone():
    c = TrainConfig()
    lrs = [learning_rate(c, i) for i in range(c.warmup_iters + 1)]
    assert all(a < b for a, b in zip(lrs, lrs[1:]))


def test_config_roundtrip_and_bad_values():
    c = TrainConfig(seed=3, use_dirl=False)
    assert TrainConfig.from_dict(c.to_dict()) == c
    with pytest.raises(ValueError):
        TrainConfig(batch_per_domain=0)


def test_topology_of_constructed_model():
    model = build_model(TrainConfig(channels=4), 2, 3)
    model.check_topology()
    assert len(model.classifiers) == len(model.discriminators) == len(LEVELS)
    assert all(d.lambda_grl == GRL_WEIGHT for d in model.discriminators)
    ids = [{id(p) for p in net.parameters()} for net in model.classifiers + model.discriminators]
    assert sum(map(len, ids)) == len(set().union(*ids))


def test_topology_check_catches_shared_classifiers():
    model = build_model(TrainConfig(channels=4), 2, 2)
    model.classifiers[1] = model.classifiers[0]
    with pytest.raises(AssertionError, match="share"):
        model.check_topology()


def test_one_gate_module_serves_every_level(bench):
    model = build_model(TrainConfig(channels=4, s_init=0.6), 2, 2)
    seen = []
    original = model.cgm.forward
    model.cgm.forward = lambda x: seen.append(x.shape) or original(x)
    model(Tensor(bench.train[0][0].image[None].astype(np.float64)))
    assert len(seen) == len(LEVELS)


# -- loss bookkeeping ------------------------------------------------------


def test_mixed_domain_batch_rejected(bench):
    with pytest.raises(ValueError, match="mixes domains"):
        make_batch([bench.train[0][0], bench.train[1][0]])


def test_empty_batch_rejected():
    with pytest.raises(ValueError, match="empty"):
        make_batch([])


def numpy_level_terms(out, tgt, domain, num_pos, clf, disc, margin=0.01):
    """Per-level terms straight from arrays, without the autograd losses."""
    eps = 1e-12
    pos = tgt.cls >= 0
    p = out.head.cls_map.data
    y = (tgt.cls[:, None] == np.arange(p.shape[1])[None, :, None, None]).astype(float)
    focal = -(0.25 * y * (1 - p) ** 2 * np.log(np.maximum(p, eps)) + 0.75 * (1 - y) * p**2 * np.log(np.maximum(1 - p, eps)))
    q = out.head.ctr_map.data[:, 0][pos]
    t = tgt.ctr[pos]
    ctr = -(t * np.log(np.maximum(q, eps)) + (1 - t) * np.log(np.maximum(1 - q, eps)))
    pr = np.moveaxis(out.head.reg_map.data, 1, -1)[pos]
    tr = tgt.ltrb[pos]
    inter = (np.minimum(pr[:, 0], tr[:, 0]) + np.minimum(pr[:, 2], tr[:, 2])) * (
        np.minimum(pr[:, 1], tr[:, 1]) + np.minimum(pr[:, 3], tr[:, 3])
    )
    area = lambda b: (b[:, 0] + b[:, 2]) * (b[:, 1] + b[:, 3])
    iou = inter / (area(pr) + area(tr) - inter)
    s = out.s_di.data
    return {
        "cls": focal.sum() / num_pos,
        "ctr": ctr.sum() / num_pos,
        "reg": -np.log(np.maximum(iou, eps)).sum() / num_pos,
        "d_adv": -np.log(np.maximum(disc(out.f_di).data[:, domain], eps)).mean(),
        "d_cls": -np.log(np.maximum(clf(out.f_ds).data[:, domain], eps)).mean(),
        "gate": np.maximum((s * (1 - s)).sum(axis=1) - margin, 0).mean(),
    }


def test_total_matches_independent_recomputation(bench):
    cfg = TrainConfig(channels=4, s_init=0.7)
    model = build_model(cfg, 2, 2)
    batch = make_batch(bench.train[1][:2])
    got = total_loss(batch, model, cfg)
    outs = model(Tensor(batch.images))
    num_pos = sum(batch.targets[l].num_positive for l in LEVELS)
    expected = 0.0
    for i, level in enumerate(LEVELS):
        t = numpy_level_terms(outs[level], batch.targets[level], 1, num_pos, model.classifiers[i], model.discriminators[i])
        for k, v in t.items():
            assert got.terms[level][k] == pytest.approx(v, rel=1e-10, abs=1e-12), (level, k)
        expected += t["cls"] + t["ctr"] + t["reg"] + 0.1 * t["d_adv"] + 0.01 * t["d_cls"] + 0.1 * t["gate"]
    assert abs(got.total_value - expected) < 1e-10
    assert abs(got.term_sum(cfg) - got.total_value) < 1e-8


class PerfectStub:
    """Returns the targets themselves as head outputs."""

    gated = False

    def __init__(self, targets):
        self.targets = targets

    def level_index(self, level):
        return LEVELS.index(level)

    def __call__(self, images):
        out = {}
        for level in LEVELS:
            t = self.targets[level]
            cls = (t.cls[:, None] == np.arange(2)[None, :, None, None]).astype(float)
            head = HeadOutputs(Tensor(cls), Tensor(t.ctr[:, None]), Tensor(np.moveaxis(t.ltrb, -1, 1)))
            f = Tensor(np.zeros((len(images.data), 4) + t.cls.shape[1:]))
            out[level] = LevelOutputs(f, None, f, None, head)
        return out


def test_perfect_prediction_with_zero_weights_gives_zero():
    # an 8-px box centred on the level-3 anchor at (4, 4) has centerness exactly 1
    image = np.zeros((3, 128, 128), dtype=np.float32)
    sample = DetectionSample(image, GroundTruth([[0.0, 0.0, 8.0, 8.0]], [1]), 0, 0)
    batch = make_batch([sample])
    assert sum(batch.targets[l].num_positive for l in LEVELS) == 1
    cfg = TrainConfig(lambda_d_adv=0.0, lambda_d_cls=0.0, lambda_gate=0.0)
    assert total_loss(batch, PerfectStub(batch.targets), cfg).total_value == 0.0


@pytest.mark.parametrize(
    "flags, zeroed",
    [
        ({"use_dsrl": False}, {"d_cls", "gate"}),
        ({"use_dirl": False}, {"d_adv"}),
        ({"use_gate_loss": False}, {"gate"}),
        ({"use_dsrl": False, "use_dirl": False}, {"d_cls", "gate", "d_adv"}),
    ],
)
def test_ablation_flags_zero_terms(bench, flags, zeroed):
    cfg = TrainConfig(channels=4, s_init=0.7, **flags)
    model = build_model(cfg, 2, 2)
    got = total_loss(make_batch(bench.train[0][:2]), model, cfg)
    for level in LEVELS:
        for k in ("d_adv", "d_cls", "gate"):
            assert (got.terms[level][k] == 0.0) == (k in zeroed), (level, k)
    assert abs(got.term_sum(cfg) - got.total_value) < 1e-8


def test_without_dsrl_head_sees_backbone_features(bench):
    model = build_model(TrainConfig(channels=4, use_dsrl=False), 2, 2)
    outs = model(Tensor(bench.train[0][0].image[None].astype(np.float64)))
    assert all(o.s_di is None and o.f_di is o.f_b for o in outs.values())
    params = {id(p) for p in model.trainable_parameters(False, True)}
    assert not params & {id(p) for p in model.cgm.parameters()}
    assert not params & {id(p) for c in model.classifiers for p in c.parameters()}


# -- training --------------------------------------------------------------


def test_two_domains_get_two_steps_per_iteration(bench):
    calls = []
    cfg = TrainConfig(**TINY)
    result = train(cfg, bench, on_step=lambda it, d, _: calls.append((it, d)))
    assert calls == [(it, d) for it in range(cfg.total_iters) for d in (0, 1)]
    assert result.steps == 2 * cfg.total_iters


def test_training_moves_parameters(bench):
    cfg = TrainConfig(**TINY)
    before = build_model(cfg, 2, 2).state_dict()
    after = train(cfg, bench).model.state_dict()
    assert any(not np.array_equal(before[k], after[k]) for k in before)


def test_equal_seeds_give_identical_records(bench):
    cfg = TrainConfig(**TINY)
    strip = lambda rs: [dataclasses.replace(r, elapsed=0.0) for r in rs]
    a, b = train(cfg, bench), train(cfg, bench)
    assert strip(a.records) == strip(b.records)
    assert len(a.records) == cfg.total_iters
    c = train(dataclasses.replace(cfg, seed=1), bench)
    assert strip(c.records) != strip(a.records)


def test_records_balance_their_terms(bench):
    cfg = TrainConfig(**TINY)
    for rec in train(cfg, bench).records:
        recomputed = sum(
            t["cls"] + t["ctr"] + t["reg"] + 0.1 * t["d_adv"] + 0.01 * t["d_cls"] + 0.1 * t["gate"]
            for t in rec.terms.values()
        )
        assert abs(recomputed - rec.total) < 1e-8
        assert rec.gate_binarization is not None


def test_divergence_is_reported(bench):
    cfg = TrainConfig(**dict(TINY, stage1_lr=1e12, warmup_factor=1.0))
    with np.errstate(all="ignore"), pytest.raises(FloatingPointError, match="diverged"):
        train(cfg, bench)


def test_sources_must_be_contiguous(bench):
    with pytest.raises(ValueError, match="keyed"):
        harness.fit_sources(TrainConfig(**TINY), {0: bench.train[0], 2: bench.train[1]}, 2)


# -- evaluation ------------------------------------------------------------


def test_binarization_fraction():
    assert binarization_fraction([np.array([0.0, 0.04, 0.96, 0.5])]) == 0.75
    assert math.isnan(binarization_fraction([np.zeros(0)]))


def test_untrained_special_init_model_is_binarized(probe_bench):
    cfg = TrainConfig(channels=8)
    res = evaluate(build_model(cfg, 2, 2), probe_bench, cfg, splits=())
    assert res["gates"]["binarization"] >= 0.95
    assert res["gates"]["mean_gate"] >= 0.999
    assert res["chance"] == 0.5


def test_random_weights_already_expose_domain_style(probe_bench):
    # the domains differ in global colour statistics, which survive random convolutions
    cfg = TrainConfig()
    res = evaluate(build_model(cfg, 2, 2), probe_bench, cfg, splits=())
    assert res["dsr_probe"] > 0.9 and res["dir_probe"] > 0.9


def test_probe_on_constant_features_is_majority():
    assert harness.probe_accuracy(np.ones((4, 3)), np.array([0, 0, 0, 1]), np.ones((2, 3)), np.array([0, 1])) == 0.5


def test_empty_split_rejected(bench):
    with pytest.raises(ValueError, match="empty"):
        bench.arrays([])


# -- ablation --------------------------------------------------------------


def test_grid_shapes():
    assert [c["name"] for c in COMPONENT_GRID] == ["base", "dsrl", "dirl", "gdifd"]
    assert {(c["use_dsrl"], c["use_dirl"]) for c in COMPONENT_GRID} == {(a, b) for a in (0, 1) for b in (0, 1)}
    assert {(c["use_gate_loss"], c["use_special_init"]) for c in GATE_INIT_GRID} == {(a, b) for a in (0, 1) for b in (0, 1)}


def test_ablate_rows_carry_configs(monkeypatch, bench):
    seen = []

    def fake(cfg, b, cache_dir=None):
        seen.append(cfg)
        gates = {"binarization": 1.0, "near_zero_channels": 0}
        return {"config": cfg.to_dict(), "metrics": {"map_test": 0.1, "map_val": 0.2, "dsr_probe": 1, "dir_probe": 1, "gates": gates}}

    monkeypatch.setattr(harness, "run_cell", fake)
    rows = ablate(TrainConfig(**TINY), bench, COMPONENT_GRID, seeds=(0, 1))
    assert len(rows) == 8
    assert [(r["cell"], r["seed"]) for r in rows[:2]] == [("base", 0), ("base", 1)]
    for row, cfg in zip(rows, seen):
        assert row["config"] == cfg.to_dict()
        assert row["config"]["seed"] == row["seed"]
    assert rows[-1]["config"]["use_dsrl"] and rows[-1]["config"]["use_dirl"]
    assert not rows[0]["config"]["use_dsrl"] and not rows[0]["config"]["use_dirl"]


def test_run_cell_is_cached(tmp_path, bench):
    cfg = TrainConfig(**TINY)
    first = run_cell(cfg, bench, cache_dir=tmp_path, splits=("val",))
    assert (tmp_path / f"{first['key']}.npz").exists()
    second = run_cell(cfg, bench, cache_dir=tmp_path, splits=("val",))
    assert second == first
    assert harness.cell_key(cfg, bench.config) != harness.cell_key(dataclasses.replace(cfg, seed=1), bench.config)
