"""Velocity network: tokens, masks, blocks, causal invariance, gradients."""

import numpy as np
import pytest

from lapflow import checkpoint
from lapflow import numerics as nm
from lapflow.model import (FlowState, ModelConfig, build_mask, cond_tokens,
                           forward, init_params, mot_block, params_astype,
                           patchify, pos_embed, randomize_params, unpatchify)
from lapflow.numerics import Tape, Tensor, backward
from lapflow.rng import Rng
from lapflow.schedule import ScheduleSpec


def small_cfg(**kw):
    base = dict(scales=2, hidden=16, heads=2, depth=2, patch=2, channels=1,
                input_size=8)
    base.update(kw)
    return ModelConfig(**base)


def make_state(cfg, rng, batch=2, active_from=0, t=0.8, label=None, dtype=np.float64):
    tensors = {}
    for k in range(cfg.scales - 1, active_from - 1, -1):
        size = cfg.input_size >> k
        tensors[k] = Tensor(rng.normal((batch, cfg.channels, size, size), dtype=dtype))
    return FlowState(tensors=tensors, t=np.full(batch, t), label=label)


# ---------------------------------------------------------------------------
# patchify / positional / conditioning
# ---------------------------------------------------------------------------

def test_patchify_p1_is_pixels():
    x = Tensor(np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4))
    tok = patchify(x, 1)
    assert tok.shape == (1, 16, 1)
    assert np.array_equal(tok.data.reshape(-1), np.arange(16))


def test_patchify_p2_row_major_order():
    x = Tensor(np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4))
    tok = patchify(x, 2)
    assert tok.shape == (1, 4, 4)
    # first patch is the top-left 2x2 block
    assert np.array_equal(tok.data[0, 0], [0, 1, 4, 5])
    assert np.array_equal(tok.data[0, 1], [2, 3, 6, 7])


def test_unpatchify_roundtrip():
    x = Tensor(np.random.randn(2, 3, 8, 8).astype(np.float32))
    for p in (1, 2, 4):
        back = unpatchify(patchify(x, p), p, 3, 8, 8)
        assert back.shape == x.shape
        assert np.array_equal(back.data, x.data)


def test_patchify_divisibility_error():
    with pytest.raises(ValueError):
        patchify(Tensor(np.zeros((1, 1, 6, 6))), 4)


def test_pos_embed_deterministic_and_bounded():
    a = pos_embed(4, 4, 16)
    b = pos_embed(4, 4, 16)
    assert a is b  # cached
    assert np.all(np.abs(a) <= 1.0)


def test_pos_embed_rows_distinct():
    for g in (8, 16, 64):
        table = pos_embed(g, g, 16)
        uniq = np.unique(np.round(table, 10), axis=0)
        assert uniq.shape[0] == g * g


def test_cond_tokens_unconditional():
    cfg = small_cfg()
    params = init_params(cfg, Rng(0))
    seq, c = cond_tokens(params, cfg, np.array([0.5]))
    assert seq.shape == (1, 1, cfg.hidden)
    assert c.shape == (1, cfg.hidden)


def test_cond_tokens_conditional():
    cfg = small_cfg(num_classes=5)
    params = init_params(cfg, Rng(0))
    seq, _ = cond_tokens(params, cfg, np.array([0.5]), label=np.array([3]))
    assert seq.shape == (1, 2, cfg.hidden)


def test_cond_tokens_label_out_of_range():
    cfg = small_cfg(num_classes=5)
    params = init_params(cfg, Rng(0))
    with pytest.raises(ValueError):
        cond_tokens(params, cfg, np.array([0.5]), label=np.array([6]))
    # the null row (id == num_classes) is legal: used for CFG drop
    cond_tokens(params, cfg, np.array([0.5]), label=np.array([5]))


def test_time_embedding_injective_at_1e3():
    cfg = small_cfg()
    params = init_params(cfg, Rng(1))
    ts = np.arange(0.0, 1.0 + 1e-9, 1e-3)
    seq, _ = cond_tokens(params, cfg, ts)
    rows = seq.data[:, 0, :]
    uniq = np.unique(rows, axis=0)
    assert uniq.shape[0] == rows.shape[0]


# ---------------------------------------------------------------------------
# mask
# ---------------------------------------------------------------------------

def test_mask_single_scale_no_cond_is_open():
    m = build_mask([1], [4], 0)
    assert np.all(m == 0.0)


def test_mask_enumerated_two_scales():
    m = build_mask([1, 0], [1, 1], 1)
    allowed = (m == 0.0).astype(int)
    assert np.array_equal(allowed, [[1, 0, 0], [1, 1, 0], [1, 1, 1]])


def test_mask_block_lower_triangular():
    m = build_mask([2, 1, 0], [2, 3, 4], 2)
    n = m.shape[0]
    for i in range(n):
        for j in range(n):
            if m[i, j] == 0.0 and j > i:
                # allowed above the diagonal only inside a diagonal block
                assert m[j, i] == 0.0
    assert not np.any(np.all(np.isneginf(m), axis=1))


def test_mask_requires_coarsest_first():
    with pytest.raises(ValueError):
        build_mask([0, 1], [2, 2], 1)


# ---------------------------------------------------------------------------
# block and forward contracts
# ---------------------------------------------------------------------------

def test_fresh_block_is_identity():
    cfg = small_cfg()
    params = init_params(cfg, Rng(0), dtype=np.float64)
    rng = Rng(3)
    groups = [(1, Tensor(rng.normal((2, 5, cfg.hidden), dtype=np.float64))),
              (0, Tensor(rng.normal((2, 16, cfg.hidden), dtype=np.float64)))]
    c = Tensor(rng.normal((2, cfg.hidden), dtype=np.float64))
    mask = build_mask([1, 0], [4, 16], 1, dtype=np.float64)
    out = mot_block(groups, c, params, "block0", cfg, mask)
    for (_, before), (_, after) in zip(groups, out):
        assert np.array_equal(before.data, after.data)


def test_fresh_model_outputs_zero():
    cfg = small_cfg()
    params = init_params(cfg, Rng(0))
    state = make_state(cfg, Rng(1), dtype=np.float32)
    v = forward(params, cfg, state)
    for k in state.tensors:
        assert v[k].shape == state.tensors[k].shape
        assert np.all(v[k].data == 0.0)


def test_forward_shapes_match_inputs():
    cfg = small_cfg(scales=3, input_size=16)
    params = init_params(cfg, Rng(0), dtype=np.float64)
    randomize_params(params, Rng(9), std=0.1)
    for active_from in (0, 1, 2):
        state = make_state(cfg, Rng(2), active_from=active_from)
        v = forward(params, cfg, state)
        assert set(v.keys()) == set(state.tensors.keys())
        for k in v:
            assert v[k].shape == state.tensors[k].shape


def test_forward_rejects_bad_active_sets():
    cfg = small_cfg(scales=3, input_size=16)
    params = init_params(cfg, Rng(0))
    rng = Rng(1)
    # missing coarsest
    st = FlowState(tensors={0: Tensor(rng.normal((1, 1, 16, 16)))}, t=0.9)
    with pytest.raises(ValueError):
        forward(params, cfg, st)
    # out-of-range scale index
    st2 = FlowState(tensors={3: Tensor(rng.normal((1, 1, 2, 2))),
                             2: Tensor(rng.normal((1, 1, 4, 4)))}, t=0.5)
    with pytest.raises(ValueError):
        forward(params, cfg, st2)
    # non-contiguous
    st3 = FlowState(tensors={2: Tensor(rng.normal((1, 1, 4, 4))),
                             0: Tensor(rng.normal((1, 1, 16, 16)))}, t=0.9)
    with pytest.raises(ValueError):
        forward(params, cfg, st3)


def _perturb_probe(cfg, params, trials, rng):
    """Max change in coarser-scale outputs when finer inputs are resampled."""
    worst = 0.0
    for i in range(trials):
        state = make_state(cfg, rng.stream("probe", i), batch=1)
        base = forward(params, cfg, state)
        for cut in range(1, cfg.scales):
            # resample every scale strictly finer than `cut`
            tensors = dict(state.tensors)
            for k in range(cut):
                size = cfg.input_size >> k
                tensors[k] = Tensor(rng.stream("fresh", i * 10 + k).normal(
                    (1, cfg.channels, size, size), dtype=np.float64))
            v2 = forward(params, cfg, FlowState(tensors=tensors, t=state.t))
            for k in range(cut, cfg.scales):
                diff = np.max(np.abs(v2[k].data - base[k].data))
                worst = max(worst, diff)
    return worst


def test_block_causal_invariance_small():
    cfg = small_cfg(scales=2, input_size=8)
    params = init_params(cfg, Rng(0), dtype=np.float64)
    randomize_params(params, Rng(4), std=0.4)
    assert _perturb_probe(cfg, params, trials=5, rng=Rng(5)) <= 1e-6


def test_parameter_disjointness():
    # a coarse-only loss must not touch finer-scale experts; finer losses do
    # reach coarser experts through attention
    cfg = small_cfg(scales=2, input_size=8, depth=2)
    params = init_params(cfg, Rng(0), dtype=np.float64)
    randomize_params(params, Rng(6), std=0.3)
    state = make_state(cfg, Rng(7), batch=1)
    with Tape() as tape:
        tape.watch(params.values())
        v = forward(params, cfg, state)
        loss = nm.tsum(nm.mul(v[1], v[1]))  # coarsest-scale-only loss
    grads = backward(tape, loss)
    fine = [n for n in params if ".scale0." in n and ("attn" in n or "ffn" in n or "mod" in n)]
    coarse_online = [n for n in params if ".scale1.attn.wq" in n]
    assert fine and all(np.all(grads[params[n]] == 0.0) for n in fine)
    assert any(np.any(grads[params[n]] != 0.0) for n in coarse_online)


def test_gradient_check_one_block():
    cfg = small_cfg(scales=2, hidden=8, heads=2, depth=1, input_size=8, patch=2)
    params = init_params(cfg, Rng(0), dtype=np.float64)
    randomize_params(params, Rng(8), std=0.2)
    rng = Rng(9)
    groups = [(1, Tensor(rng.normal((1, 3, 8), dtype=np.float64), requires_grad=True)),
              (0, Tensor(rng.normal((1, 4, 8), dtype=np.float64), requires_grad=True))]
    c = Tensor(rng.normal((1, 8), dtype=np.float64), requires_grad=True)
    mask = build_mask([1, 0], [2, 4], 1, dtype=np.float64)

    def f(g1, g0, cv):
        out = mot_block([(1, g1), (0, g0)], cv, params, "block0", cfg, mask)
        acc = None
        for _, tok in out:
            term = nm.tsum(nm.mul(tok, tok))
            acc = term if acc is None else nm.add(acc, term)
        return acc

    err = nm.grad_check(f, [groups[0][1], groups[1][1], c], h=1e-6)
    assert err <= 1e-4, err


def test_checkpoint_roundtrip(tmp_path):
    cfg = small_cfg(num_classes=3)
    spec = ScheduleSpec(K=2, critical_times=(0.5,))
    params = init_params(cfg, Rng(0))
    randomize_params(params, Rng(1), std=0.1)
    ema = {k: Tensor(v.data * 0.5) for k, v in params.items()}
    path = tmp_path / "m.ckpt"
    checkpoint.save(path, params, cfg, spec, ema=ema, meta={"step": 7})
    p2, ema2, cfg2, spec2, meta = checkpoint.load(path)
    assert cfg2 == cfg
    assert spec2 == spec
    assert meta["step"] == 7
    assert set(p2) == set(params)
    for name in params:
        assert np.array_equal(p2[name].data, params[name].data)
        assert np.array_equal(ema2[name].data, ema[name].data)


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"PNG\x00whatever")
    with pytest.raises(ValueError):
        checkpoint.load(path)
