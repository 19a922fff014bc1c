import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from grouptron import tensorcore as tc
from grouptron.dataio import make_windows
from grouptron.model import Grouptron, ModelConfig, featurize
from grouptron.synthetic import crossing_corpus
from grouptron.tensorcore import Tensor
from grouptron.trainer import (
    AdamState,
    TrainConfig,
    TrainingDiverged,
    batch_bounds,
    clip_global_norm,
    global_norm,
    train,
    write_metrics,
)


def with_grad(*grads):
    out = []
    for g in grads:
        p = tc.parameter(np.zeros(np.shape(g)))
        p.grad = np.array(g, dtype=float)
        out.append(p)
    return out


# ---------------------------------------------------------------- clipping


def test_clip_below_threshold_untouched():
    (p,) = with_grad([0.3, 0.4])
    assert clip_global_norm([p], 1.0) == 1.0
    assert np.array_equal(p.grad, [0.3, 0.4])


def test_clip_three_four():
    (p,) = with_grad([3.0, 4.0])
    assert clip_global_norm([p], 1.0) == 0.2
    np.testing.assert_allclose(p.grad, [0.6, 0.8], rtol=0, atol=1e-15)


def test_clip_combined_norm_two():
    ps = with_grad([1.0, 1.0], [[1.0], [1.0]], 0.0)
    assert global_norm(ps) == 2.0
    assert clip_global_norm(ps, 1.0) == 0.5
    assert np.array_equal(ps[0].grad, [0.5, 0.5])
    assert np.array_equal(ps[1].grad, [[0.5], [0.5]])


def test_clip_skips_missing_grads():
    p = tc.parameter(np.ones(3))
    (q,) = with_grad([0.0, 2.0])
    assert clip_global_norm([p, q], 1.0) == 0.5
    assert p.grad is None


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 5), st.floats(1e-3, 1e3))
def test_clipped_norm_bounded(seed, n, scale):
    rng = np.random.default_rng(seed)
    ps = with_grad(*[rng.normal(size=rng.integers(1, 6)) * scale for _ in range(n)])
    before = global_norm(ps)
    s = clip_global_norm(ps, 1.0)
    after = global_norm(ps)
    assert after <= 1.0 + 1e-9
    assert 0 < s <= 1.0
    assert abs(after - min(before, 1.0)) <= 1e-9 * max(1.0, before)


# ---------------------------------------------------------------- schedule / adam


@given(st.integers(0, 10_000))
def test_lr_schedule_exact(e):
    assert TrainConfig().lr_at(e) == 0.001 * 0.9999 ** e


def test_adam_zero_gradient_is_noop():
    rng = np.random.default_rng(0)
    params = {"a": tc.parameter(rng.normal(size=(3, 4))), "b": tc.parameter(rng.normal(size=5))}
    before = {k: p.data.copy() for k, p in params.items()}
    adam = AdamState()
    for _ in range(3):
        for p in params.values():
            p.grad = np.zeros_like(p.data)
        adam.update(params, 0.01)
    assert all(np.array_equal(params[k].data, before[k]) for k in params)
    assert all(adam.m[k].shape == params[k].shape for k in params)


def test_adam_first_step_moves_by_lr():
    p = tc.parameter(np.array([1.0, -1.0]))
    p.grad = np.array([2.0, -0.5])
    AdamState().update({"p": p}, 0.1)
    # bias-corrected first step is lr * sign(g) up to eps
    np.testing.assert_allclose(p.data, [0.9, -0.9], rtol=0, atol=1e-8)


def test_config_validation():
    for kw in ({"decay": 0.0}, {"decay": 1.5}, {"lr0": 0.0}, {"epochs": -1},
               {"batch_size": 0}, {"clip_mode": "foo"}):
        with pytest.raises(ValueError):
            TrainConfig(**kw)
    assert TrainConfig(decay=1.0).decay == 1.0


def test_batch_size_defaults():
    cfg = TrainConfig()
    assert cfg.resolved_batch_size(100) == 32
    assert cfg.resolved_batch_size(256) == 256
    assert TrainConfig(batch_size=7).resolved_batch_size(1000) == 7


@pytest.mark.parametrize("n,bs,expect", [
    (10, 4, [(0, 4), (4, 8), (8, 10)]),
    (9, 4, [(0, 4), (4, 9)]),
    (1, 4, [(0, 1)]),
    (8, 4, [(0, 4), (4, 8)]),
])
def test_batch_bounds(n, bs, expect):
    assert batch_bounds(n, bs) == expect


@given(st.integers(1, 200), st.integers(2, 64))
def test_batch_bounds_cover(n, bs):
    b = batch_bounds(n, bs)
    assert b[0][0] == 0 and b[-1][1] == n
    assert all(x[1] == y[0] for x, y in zip(b, b[1:]))
    assert len(b) == 1 or all(hi - lo >= 2 for lo, hi in b)


# ---------------------------------------------------------------- train loop


@pytest.fixture(scope="module")
def items():
    cfg = ModelConfig()
    ws = [w for s in crossing_corpus(2, seed=1, n_ticks=21) for w in make_windows(s)]
    return [featurize(w, cfg) for w in ws]


def snapshot(model):
    return {k: t.data.copy() for k, t in model.parameters().items()}


def test_zero_epochs_keeps_init(items, tmp_path):
    m = Grouptron.initialize(ModelConfig(), seed=5)
    res = train(m, items, TrainConfig(epochs=0, seed=5), metrics_path=tmp_path / "m.csv")
    ref = snapshot(Grouptron.initialize(ModelConfig(), seed=5))
    assert res.history == [] and res.steps == 0
    assert all(np.array_equal(v, ref[k]) for k, v in snapshot(m).items())


def test_seeded_runs_are_bit_identical(items):
    cfg = TrainConfig(epochs=2, batch_size=8, seed=4, lr0=0.01)
    runs = []
    for _ in range(2):
        m = Grouptron.initialize(ModelConfig(), seed=4)
        res = train(m, items, cfg)
        runs.append((snapshot(m), [h.mean_loss for h in res.history]))
    assert runs[0][1] == runs[1][1]
    assert all(np.array_equal(runs[0][0][k], runs[1][0][k]) for k in runs[0][0])
    assert runs[0][1][-1] < runs[0][1][0]


def test_metrics_csv(tmp_path, items):
    m = Grouptron.initialize(ModelConfig(), seed=0)
    path = tmp_path / "metrics.csv"
    res = train(m, items, TrainConfig(epochs=2, batch_size=12, lr0=0.002, decay=0.5),
                metrics_path=path, header={"seed": 0})
    lines = path.read_text().splitlines()
    assert json.loads(lines[0][2:]) == {"seed": 0}
    rows = list(csv.DictReader(lines[1:]))
    assert [r["epoch"] for r in rows] == ["0", "1"]
    assert [float(r["lr"]) for r in rows] == [0.002, 0.001]
    assert [float(r["mean_loss"]) for r in rows] == [h.mean_loss for h in res.history]
    assert res.steps == 2 * len(batch_bounds(len(items), 12))


def test_write_metrics_without_header(tmp_path):
    p = tmp_path / "m.csv"
    write_metrics(p, [])
    assert p.read_text().splitlines() == ["epoch,mean_loss,lr,wall_time_s"]


def test_divergence_dumps_batch(items, tmp_path, monkeypatch):
    m = Grouptron.initialize(ModelConfig(), seed=0)

    def bad_loss(batch, loss_cfg=None):
        raise tc.NumericError("non-finite value produced by test")

    monkeypatch.setattr(m, "loss", bad_loss)
    dump = tmp_path / "dump.json"
    with pytest.raises(TrainingDiverged):
        train(m, items, TrainConfig(epochs=1, batch_size=4), dump_path=dump)
    record = json.loads(dump.read_text())
    assert record["epoch"] == 0 and len(record["windows"]) == 4


def test_nan_loss_aborts(items, tmp_path, monkeypatch):
    m = Grouptron.initialize(ModelConfig(), seed=0)
    monkeypatch.setattr(m, "loss", lambda batch, loss_cfg=None: Tensor(np.nan))
    with pytest.raises(TrainingDiverged):
        train(m, items, TrainConfig(epochs=1, batch_size=4), dump_path=tmp_path / "d.json")
    assert (tmp_path / "d.json").exists()


def test_empty_training_set_rejected():
    with pytest.raises(ValueError):
        train(Grouptron.initialize(ModelConfig()), [], TrainConfig(epochs=1))
