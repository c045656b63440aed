"""Training loop: loss, optimizer, EMA, LR schedule, determinism."""

import numpy as np
import pytest

from lapflow import flowtrain
from lapflow.flowtrain import (AdamW, DivergenceError, TrainConfig, cosine_lr,
                               ema_update, init_train_state, lapflow_groups,
                               loss_mv, train_step, train_loop)
from lapflow.model import ModelConfig
from lapflow.numerics import Tensor
from lapflow.rng import Rng
from lapflow.schedule import ScheduleSpec


def tiny_cfg(**kw):
    base = dict(scales=2, hidden=16, heads=2, depth=1, patch=2, channels=1,
                input_size=8)
    base.update(kw)
    return ModelConfig(**base)


def tiny_tcfg(**kw):
    base = dict(batch_size=4, steps=10, lr=1e-3, lr_schedule="constant",
                ema_decay=0.99, seed=0, log_every=1)
    base.update(kw)
    return TrainConfig(**base)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def test_loss_zero_when_equal():
    a = {0: Tensor(np.random.randn(2, 1, 4, 4))}
    b = {0: Tensor(a[0].data.copy())}
    assert float(loss_mv(a, b).data) == 0.0


def test_loss_unit_error():
    pred = {0: Tensor(np.ones((2, 1, 4, 4)))}
    target = {0: Tensor(np.zeros((2, 1, 4, 4)))}
    assert np.isclose(float(loss_mv(pred, target).data), 1.0)


def test_loss_weighted_sum_of_scale_means():
    pred = {0: Tensor(np.full((1, 1, 4, 4), np.sqrt(0.5), dtype=np.float64)),
            1: Tensor(np.full((1, 1, 2, 2), 0.5, dtype=np.float64))}
    target = {0: Tensor(np.zeros((1, 1, 4, 4), dtype=np.float64)),
              1: Tensor(np.zeros((1, 1, 2, 2), dtype=np.float64))}
    # per-scale MSEs 0.5 and 0.25 with unit weights sum to 0.75
    assert np.isclose(float(loss_mv(pred, target).data), 0.75)


def test_loss_scale_set_mismatch():
    with pytest.raises(ValueError):
        loss_mv({0: Tensor(np.zeros((1, 2)))}, {1: Tensor(np.zeros((1, 2)))})


# ---------------------------------------------------------------------------
# lr schedule and EMA
# ---------------------------------------------------------------------------

def test_cosine_lr_boundaries():
    assert cosine_lr(0, 100, 2e-4, 1e-6) == pytest.approx(2e-4)
    assert cosine_lr(100, 100, 2e-4, 1e-6) == pytest.approx(1e-6)
    assert cosine_lr(50, 100, 2e-4, 1e-6) == pytest.approx((2e-4 + 1e-6) / 2)


def test_ema_decay_extremes():
    params = {"w": Tensor(np.full(4, 2.0))}
    shadow = {"w": np.zeros(4, dtype=np.float32)}
    ema_update(shadow, params, 0.0)
    assert np.allclose(shadow["w"], 2.0)
    shadow = {"w": np.full(4, 5.0, dtype=np.float32)}
    ema_update(shadow, params, 1.0)
    assert np.allclose(shadow["w"], 5.0)


def test_ema_geometric_series():
    decay = 0.9
    p = 3.0
    s0 = 1.0
    params = {"w": Tensor(np.full(1, p, dtype=np.float64))}
    shadow = {"w": np.full(1, s0, dtype=np.float64)}
    n = 17
    for _ in range(n):
        ema_update(shadow, params, decay)
    expect = s0 * decay ** n + p * (1 - decay ** n)
    assert np.allclose(shadow["w"], expect, rtol=1e-10)


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------

def test_adamw_zero_grad_is_noop_without_decay():
    params = {"w": Tensor(np.random.randn(6).astype(np.float32), requires_grad=True)}
    before = params["w"].data.copy()
    opt = AdamW(params, weight_decay=0.0)
    opt.step(params, {}, lr=1e-2)
    assert np.array_equal(params["w"].data, before)


def test_adamw_zero_grad_only_decays():
    params = {"w": Tensor(np.full(4, 2.0, dtype=np.float32), requires_grad=True)}
    opt = AdamW(params, weight_decay=0.1)
    opt.step(params, {}, lr=1e-1)
    assert np.allclose(params["w"].data, 2.0 * (1 - 1e-1 * 0.1))


def test_adamw_descends_quadratic():
    target = np.array([1.0, -2.0], dtype=np.float32)
    params = {"w": Tensor(np.zeros(2, dtype=np.float32), requires_grad=True)}
    opt = AdamW(params)
    for _ in range(400):
        g = params["w"].data - target
        opt.step(params, {params["w"]: g}, lr=2e-2)
    assert np.allclose(params["w"].data, target, atol=1e-2)


# ---------------------------------------------------------------------------
# training steps
# ---------------------------------------------------------------------------

def test_first_step_loss_matches_rectified_flow_oracle():
    # zero-init model, K=1 linear: prediction is identically zero, so the
    # loss is the mean squared rectified-flow target ||x1 - x0||^2
    cfg = tiny_cfg(scales=1)
    spec = ScheduleSpec(K=1)
    tcfg = tiny_tcfg(batch_size=8)
    ts = init_train_state(cfg, tcfg)
    images = Rng(5).stream("data").normal((32, 1, 8, 8)).astype(np.float32)
    idx = Rng(tcfg.seed).stream("batch", 0).integers(0, 32, (8,))
    x1 = images[idx]
    # reproduce the step's noise draw independently
    step_rng = Rng(tcfg.seed).stream("train", 0)
    x0 = step_rng.stream("noise").normal(x1.shape, dtype=np.float32)
    expect = float(np.mean((x1 - x0) ** 2))
    loss = train_step(ts, x1, None, cfg, spec, tcfg)
    assert np.isclose(loss, expect, rtol=1e-5)


def test_training_deterministic_bit_identical():
    cfg = tiny_cfg()
    spec = ScheduleSpec(K=2, critical_times=(0.5,))
    images = Rng(5).stream("data").normal((16, 1, 8, 8)).astype(np.float32)

    def run():
        ts = init_train_state(cfg, tiny_tcfg())
        for step in range(10):
            idx = Rng(0).stream("batch", step).integers(0, 16, (4,))
            train_step(ts, images[idx], None, cfg, spec, tiny_tcfg())
        return ts

    a, b = run(), run()
    for name in a.params:
        assert np.array_equal(a.params[name].data, b.params[name].data), name
        assert np.array_equal(a.ema[name], b.ema[name]), name


def test_stage_coverage_probabilities():
    # scale k trains whenever s <= k: probability (k+1)/K
    spec = ScheduleSpec(K=3, critical_times=(0.67, 0.33))
    cfg = tiny_cfg(scales=3, input_size=16)
    n = 10_000
    rng = Rng(0)
    s, t = [], []
    from lapflow.schedule import sample_stage_time
    sv, tv = sample_stage_time(rng.stream("st"), spec, n=n)
    for k in range(3):
        p_hat = np.mean(sv <= k)
        p = (k + 1) / 3
        sigma = np.sqrt(p * (1 - p) / n)
        assert abs(p_hat - p) <= 3 * sigma
    knots = np.asarray(spec.knots)
    assert np.all(tv >= knots[sv + 1] - 1e-12)


def test_group_states_respect_time_windows():
    cfg = tiny_cfg(scales=3, input_size=16)
    spec = ScheduleSpec(K=3, critical_times=(0.67, 0.33))
    x1 = Rng(1).stream("d").normal((32, 1, 16, 16)).astype(np.float32)
    groups, s, t = lapflow_groups(x1, None, spec, cfg, Rng(2).stream("g"))
    total = 0
    for state, targets, n in groups:
        total += n
        act = state.active
        assert act[0] == 2  # coarsest always present
        for k in act:
            assert np.all(np.asarray(state.t) >= spec.start_time(k) - 1e-12)
        assert set(targets) == set(state.tensors)
    assert total == 32


def test_divergence_error_carries_diagnostics():
    cfg = tiny_cfg()
    spec = ScheduleSpec(K=2, critical_times=(0.5,))
    tcfg = tiny_tcfg()
    ts = init_train_state(cfg, tcfg)
    # poison the parameters so the forward pass produces non-finite values
    ts.params["time.w1"].data[:] = np.inf
    x1 = Rng(3).stream("d").normal((4, 1, 8, 8)).astype(np.float32)
    with np.errstate(all="ignore"), pytest.raises(DivergenceError) as ei:
        train_step(ts, x1, None, cfg, spec, tcfg)
    assert ei.value.step == 0


def test_train_loop_smoke_loss_decreases(tmp_path):
    # constant-image dataset: loss should fall well below its start
    cfg = tiny_cfg()
    spec = ScheduleSpec(K=2, critical_times=(0.5,))
    tcfg = tiny_tcfg(steps=200, batch_size=8, lr=2e-3, log_every=50)
    images = np.full((8, 1, 8, 8), 0.4, dtype=np.float32)
    log = tmp_path / "log.csv"
    losses = []
    ts = train_loop(cfg, spec, tcfg, images, log_path=log,
                    progress=lambda s, l: losses.append((s, l)))
    assert ts.step == 200
    first, last = losses[0][1], losses[-1][1]
    assert last <= 0.5 * first, (first, last)
    text = log.read_text().splitlines()
    assert text[0] == "step,loss,lr,stage_histogram"
    assert len(text) > 3
