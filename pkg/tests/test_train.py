import math

import numpy as np
import pytest

from mamelab import data
from mamelab.bench import estimate_flops
from mamelab.merge import STRATEGIES, MergeError
from mamelab.model import MergeSchedule, Model, ModelConfig, merge_layers
from mamelab.train import (TrainConfig, evaluate, evaluate_split, fine_tune, loss_and_grads, lr_at, select_tau,
                           sweep, sweep_csv, train)

SMALL_MODEL = dict(depth=4, embed_dim=16, state_dim=4, grid_side=4, raw_dim=6, n_classes=4, dt_rank=2)
SMALL_DATA = dict(n_classes=4, per_class=10, val_per_class=5, grid_side=4, raw_dim=6, blob=3)


def small(sigma=0.5, seed=0, **model_kw):
    ds = data.generate(data.DatasetSpec(**{**SMALL_DATA, "sigma": sigma, "seed": seed}))
    return ds, Model(ModelConfig(**{**SMALL_MODEL, "seed": seed, **model_kw}))


@pytest.fixture(scope="module")
def trained():
    ds, m = small()
    res = train(m, ds.train, TrainConfig(epochs=4, batch_size=16), ds.val)
    return ds, m, res


def test_one_epoch_on_ten_samples():
    ds, m = small()
    sub = ds.train.subset(np.arange(10))
    res = train(m, sub, TrainConfig(epochs=1, batch_size=4))
    assert len(res.history) == 1
    assert math.isfinite(res.history[0]["loss"])


def test_zero_learning_rate_keeps_parameters():
    ds, m = small()
    before = {k: v.data.copy() for k, v in m.parameters().items()}
    train(m, ds.train, TrainConfig(epochs=1, lr=0.0, weight_decay=0.0, batch_size=16))
    for k, v in m.parameters().items():
        assert np.array_equal(v.data, before[k]), k


def test_noise_free_data_is_learned():
    ds, m = small(sigma=0.0)
    l0 = evaluate_split(m, ds.train)[0]
    train(m, ds.train, TrainConfig(epochs=20, batch_size=8, lr=3e-3))
    assert evaluate_split(m, ds.train)[0] < l0 / 10


def test_empty_schedule_reproduces_logged_accuracy(trained):
    ds, m, res = trained
    assert evaluate(m, ds.val, MergeSchedule.empty()) == res.last("val")["acc"]
    assert evaluate(m, ds.val, None) == res.last("val")["acc"]


def test_oversized_reduction_is_rejected(trained):
    ds, m, _ = trained
    with pytest.raises(MergeError, match="reduction exceeds"):
        evaluate(m, ds.val, MergeSchedule.uniform([0], 9))


def test_training_is_deterministic():
    out = []
    for _ in range(2):
        ds, m = small()
        res = train(m, ds.train, TrainConfig(epochs=2, batch_size=16), ds.val,
                    MergeSchedule.uniform([1, 2], 2, score="random"))
        out.append((res.metrics_csv(), m.parameters()["head_w"].data.copy()))
    assert out[0][0] == out[1][0]
    assert np.array_equal(out[0][1], out[1][1])


def test_sharded_gradients_match_single_worker():
    ds, m = small()
    g, y = ds.train.grids[:12], ds.train.labels[:12]
    sched = MergeSchedule.uniform([1, 2], 2)
    l1, a1, g1 = loss_and_grads(m, g, y, sched, workers=1)
    l3, a3, g3 = loss_and_grads(m, g, y, sched, workers=3)
    assert l1 == pytest.approx(l3, rel=1e-5) and a1 == a3
    for x, z in zip(g1, g3):
        np.testing.assert_allclose(x, z, rtol=1e-3, atol=1e-6)
    again = loss_and_grads(m, g, y, sched, workers=3)
    assert all(np.array_equal(x, z) for x, z in zip(g3, again[2]))


def test_learning_rate_schedule():
    cfg = TrainConfig(epochs=10, lr=1.0, warmup_epochs=1.0)
    assert lr_at(cfg, 0, 100, 10) < lr_at(cfg, 9, 100, 10) <= 1.0
    assert lr_at(cfg, 10, 100, 10) == pytest.approx(1.0, rel=1e-2)
    assert lr_at(cfg, 99, 100, 10) < 0.01


def test_metrics_csv(trained, tmp_path):
    _, _, res = trained
    lines = res.metrics_csv().splitlines()
    assert lines[0] == "epoch,split,loss,acc"
    assert len(lines) == 1 + 2 * 4


def test_fine_tune_uses_a_fifth_of_the_epochs():
    ds, m = small()
    res = fine_tune(m, ds.train, TrainConfig(epochs=10, batch_size=16), MergeSchedule.uniform([1, 2], 2))
    assert len(res.history) == 2


def test_tau_sweep_one_row_per_value(trained):
    ds, m, _ = trained
    base = MergeSchedule.uniform([1, 2], 2)
    rows = sweep(m, ds.val, "tau", [0.1, 1, 10, 20, 50], base)
    assert [r.value for r in rows] == ["0.1", "1", "10", "20", "50"]
    assert len(sweep_csv(rows).splitlines()) == 6


def test_strategy_sweep_covers_all(trained):
    ds, m, _ = trained
    rows = sweep(m, ds.val, "strategy", STRATEGIES, MergeSchedule.uniform([1, 2], 2))
    assert {r.value for r in rows} == set(STRATEGIES)
    assert all(0.0 <= r.acc <= 1.0 for r in rows)


def test_layer_sweep_flops_follow_placement(trained):
    ds, _, _ = trained
    m = Model(ModelConfig(**{**SMALL_MODEL, "depth": 6}))
    rows = sweep(m, ds.val, "layers", ["shallow", "standard", "deep"], MergeSchedule.uniform([0, 1, 2], 1))
    assert rows[0].gflops < rows[1].gflops < rows[2].gflops


def test_zero_r_ignores_other_settings(trained):
    ds, m, _ = trained
    base = evaluate(m, ds.val)
    for strategy in STRATEGIES:
        for tau in (0.1, 50.0):
            s = MergeSchedule.uniform([1, 2], 0, tau=tau, strategy=strategy)
            assert evaluate(m, ds.val, s) == base
    assert estimate_flops(m.cfg, MergeSchedule.uniform([1, 2], 0)).total == estimate_flops(m.cfg).total


def test_select_tau_returns_grid_member(trained):
    ds, m, _ = trained
    tau, losses = select_tau(m, ds.train, MergeSchedule.uniform([1, 2], 2))
    assert tau in (10.0, 1.0, 0.1, 0.01)
    assert min(l for _, l in losses) == dict(losses)[tau]


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(optimizer="lbfgs")
