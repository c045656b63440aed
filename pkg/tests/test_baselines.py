"""Edify-style cascade and pyramidal stagewise flow."""

import numpy as np
import pytest

from lapflow.baselines import (EdifySpec, PyramidalSpec, down_by,
                               edify_groups, edify_sample,
                               edify_state_and_velocity, pf_groups, pf_jump,
                               pf_sample, pf_train_targets, up_by,
                               variance_matched_noise)
from lapflow.model import ModelConfig, init_params
from lapflow.rng import Rng


def edify_cfg():
    return ModelConfig(scales=3, hidden=16, heads=2, depth=1, patch=2,
                       channels=1, input_size=16, stage_tokens=True)


def pf_cfg(K=2):
    return ModelConfig(scales=K, hidden=16, heads=2, depth=1, patch=2,
                       channels=1, input_size=16, stage_tokens=True)


# ---------------------------------------------------------------------------
# Edify states and velocities
# ---------------------------------------------------------------------------

def test_edify_spec_validation():
    with pytest.raises(ValueError):
        EdifySpec(t1=0.3, t2=0.6)
    with pytest.raises(ValueError):
        EdifySpec(t1=1.2, t2=0.3)


def test_edify_terminal_state_is_pooled_clean_image():
    spec = EdifySpec()
    rng = Rng(0)
    x1 = rng.normal((2, 1, 16, 16), dtype=np.float64)
    x0 = rng.normal((2, 1, 16, 16), dtype=np.float64)
    for k in range(3):
        x_t, _ = edify_state_and_velocity(x1, x0, k, 1.0, spec)
        assert np.allclose(x_t, down_by(x1, k))


def test_edify_t0_is_pooled_noise():
    spec = EdifySpec()
    rng = Rng(1)
    x1 = rng.normal((1, 1, 16, 16), dtype=np.float64)
    x0 = rng.normal((1, 1, 16, 16), dtype=np.float64)
    x_t, _ = edify_state_and_velocity(x1, x0, 2, 0.0, spec)
    assert np.allclose(x_t, down_by(x0, 2))


def test_edify_velocity_matches_finite_difference():
    spec = EdifySpec()
    rng = Rng(2)
    x1 = rng.normal((1, 1, 16, 16), dtype=np.float64)
    x0 = rng.normal((1, 1, 16, 16), dtype=np.float64)
    h = 1e-6
    for k in range(3):
        lo = spec.start_time(k)
        for t in np.linspace(lo + 1e-3, 1 - 1e-3, 7):
            x_t, u = edify_state_and_velocity(x1, x0, k, t, spec)
            xp, _ = edify_state_and_velocity(x1, x0, k, t + h, spec)
            xm, _ = edify_state_and_velocity(x1, x0, k, t - h, spec)
            fd = (xp - xm) / (2 * h)
            assert np.max(np.abs(u - fd) / np.maximum(1, np.abs(u))) <= 1e-4


def test_edify_time_window_enforced():
    spec = EdifySpec(t1=2 / 3, t2=1 / 3)
    rng = Rng(3)
    x1 = rng.normal((1, 1, 8, 8), dtype=np.float64)
    x0 = rng.normal((1, 1, 8, 8), dtype=np.float64)
    with pytest.raises(ValueError):
        edify_state_and_velocity(x1, x0, 0, 0.5, spec)  # below T_1


def test_edify_zero_model_sampling_closed_form():
    # with zero velocity the integrations are identity maps, so the output
    # is just the renoise cascade composed by hand
    cfg = edify_cfg()
    spec = EdifySpec(t1=2 / 3, t2=1 / 3)
    params = init_params(cfg, Rng(0))
    out, info = edify_sample(params, cfg, spec, 2, Rng(5).stream("s"),
                             solver="euler", steps=4)
    x0 = Rng(5).stream("s").stream("noise").normal((2, 1, 16, 16), dtype=np.float64)
    state = down_by(x0, 2)
    state = up_by(state, 1) + (1 - spec.t2) * (down_by(x0, 1) - up_by(down_by(x0, 2), 1))
    state = up_by(state, 1) + (1 - spec.t1) * (x0 - up_by(down_by(x0, 1), 1))
    assert np.allclose(out, state, atol=1e-12)
    assert len(info["segments"]) == 3


def test_edify_groups_single_scale_each():
    cfg = edify_cfg()
    spec = EdifySpec()
    x1 = Rng(1).stream("d").normal((16, 1, 16, 16)).astype(np.float32)
    groups, k_draw, t = edify_groups(x1, None, spec, cfg, Rng(2).stream("g"))
    assert sum(n for _, _, n in groups) == 16
    for state, targets, _ in groups:
        assert len(state.active) == 1
        k = state.active[0]
        assert state.stage == k
        size = 16 >> k
        assert state.tensors[k].shape[-1] == size


# ---------------------------------------------------------------------------
# Pyramidal flow
# ---------------------------------------------------------------------------

def test_pf_spec_default_tiles():
    spec = PyramidalSpec(K=2)
    assert spec.stage_times(1) == (0.0, 0.5)
    assert spec.stage_times(0) == (0.5, 1.0)
    with pytest.raises(ValueError):
        PyramidalSpec(K=3, boundaries=(0.3, 0.6))


def test_pf_targets_interpolation_endpoints():
    spec = PyramidalSpec(K=2)
    rng = Rng(0)
    x1 = rng.normal((2, 1, 16, 16), dtype=np.float64)
    x0 = rng.normal((2, 1, 16, 16), dtype=np.float64)
    for k in range(2):
        s_k, e_k = spec.stage_times(k)
        x0_k = down_by(x0, k)
        x_s = s_k * up_by(down_by(x1, k + 1), 1) + (1 - s_k) * x0_k
        x_e = e_k * down_by(x1, k) + (1 - e_k) * x0_k
        at_s, _ = pf_train_targets(x1, x0, k, s_k, spec)
        at_e, _ = pf_train_targets(x1, x0, k, e_k, spec)
        assert np.allclose(at_s, x_s, atol=1e-12)
        assert np.allclose(at_e, x_e, atol=1e-12)


def test_pf_target_is_exact_affine_derivative():
    spec = PyramidalSpec(K=2)
    rng = Rng(1)
    x1 = rng.normal((1, 1, 8, 8), dtype=np.float64)
    x0 = rng.normal((1, 1, 8, 8), dtype=np.float64)
    k = 0
    s_k, e_k = spec.stage_times(k)
    h = 1e-7
    t = 0.73
    x_t, u = pf_train_targets(x1, x0, k, t, spec)
    xp, _ = pf_train_targets(x1, x0, k, t + h, spec)
    xm, _ = pf_train_targets(x1, x0, k, t - h, spec)
    assert np.allclose((xp - xm) / (2 * h), u, atol=1e-6)
    # and the target is constant across the stage
    _, u2 = pf_train_targets(x1, x0, k, 0.9, spec)
    assert np.allclose(u, u2, atol=1e-12)


def test_pf_time_outside_stage_errors():
    spec = PyramidalSpec(K=2)
    rng = Rng(2)
    x1 = rng.normal((1, 1, 8, 8), dtype=np.float64)
    x0 = rng.normal((1, 1, 8, 8), dtype=np.float64)
    with pytest.raises(ValueError):
        pf_train_targets(x1, x0, 0, 0.2, spec)  # stage 0 lives on [0.5, 1]


def test_pf_jump_factor_vanishes_at_s_one():
    rng = Rng(3)
    x_end = rng.normal((1, 1, 4, 4), dtype=np.float64)
    x0 = rng.normal((1, 1, 8, 8), dtype=np.float64)
    out = pf_jump(x_end, x0, 1, 1.0)
    assert np.allclose(out, up_by(x_end, 1))


def test_variance_matched_noise_moments():
    m = variance_matched_noise(Rng(4).stream("m"), (1, 1, 1024, 1024))
    assert abs(m.var() - 1.0) <= 0.02
    block_sums = down_by(m, 1) * 4.0
    assert np.max(np.abs(block_sums)) <= 1e-10


def test_pf_jump_variance_matches_training_start():
    # Monte-Carlo check of the second-moment equality between the jumped
    # state and the next stage's training start point, on pure noise
    spec = PyramidalSpec(K=2)
    rng = Rng(5)
    n = 512  # 512*32*32 > 5e5 pixels per estimate
    size = 32
    k = 1
    s_prev = spec.stage_times(0)[0]
    x1 = rng.stream("x1").normal((n, 1, size, size), dtype=np.float64)
    x0 = rng.stream("x0").normal((n, 1, size, size), dtype=np.float64)
    # stage-k terminal on pure noise: its training endpoint at e_k
    x_e, _ = pf_train_targets(x1, x0, k, spec.stage_times(k)[1], spec)
    jumped = pf_jump(x_e, x0, k, s_prev, rng=rng.stream("j"),
                     mode="variance_matched")
    start, _ = pf_train_targets(x1, x0, k - 1, s_prev, spec)
    v_jump, v_start = jumped.var(), start.var()
    assert abs(v_jump - v_start) / v_start <= 0.02, (v_jump, v_start)


def test_pf_zero_model_sampling_closed_form():
    cfg = pf_cfg(K=2)
    spec = PyramidalSpec(K=2)
    params = init_params(cfg, Rng(0))
    out, info = pf_sample(params, cfg, spec, 2, Rng(6).stream("s"),
                          solver="euler", steps=4, jump_mode="algorithmic")
    root = Rng(6).stream("s")
    x0 = root.stream("noise").normal((2, 1, 16, 16), dtype=np.float64)
    start = root.stream("start").normal((2, 1, 8, 8), dtype=np.float64) / 2.0
    s0 = spec.stage_times(0)[0]
    expect = up_by(start, 1) + (1 - s0) * (x0 - up_by(down_by(x0, 1), 1))
    assert np.allclose(out, expect, atol=1e-12)
    assert len(info["segments"]) == 2


def test_pf_single_stage_plain_sampling():
    cfg = pf_cfg(K=1)
    spec = PyramidalSpec(K=1)
    params = init_params(cfg, Rng(0))
    out, info = pf_sample(params, cfg, spec, 1, Rng(7).stream("s"),
                          solver="euler", steps=3)
    assert out.shape == (1, 1, 16, 16)
    assert len(info["segments"]) == 1


def test_pf_sampling_deterministic():
    cfg = pf_cfg(K=2)
    spec = PyramidalSpec(K=2)
    params = init_params(cfg, Rng(0))
    a, _ = pf_sample(params, cfg, spec, 2, Rng(8).stream("s"), solver="euler",
                     steps=4, jump_mode="variance_matched")
    b, _ = pf_sample(params, cfg, spec, 2, Rng(8).stream("s"), solver="euler",
                     steps=4, jump_mode="variance_matched")
    assert np.array_equal(a, b)


def test_edify_sampling_deterministic():
    cfg = edify_cfg()
    spec = EdifySpec()
    params = init_params(cfg, Rng(0))
    a, _ = edify_sample(params, cfg, spec, 2, Rng(9).stream("s"), solver="euler", steps=4)
    b, _ = edify_sample(params, cfg, spec, 2, Rng(9).stream("s"), solver="euler", steps=4)
    assert np.array_equal(a, b)
