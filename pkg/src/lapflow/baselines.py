"""Multi-scale comparison flows sharing the numerics, model, and trainer.

Three baselines live here or fall out of the main pipeline:

  lfm        single-scale flow matching == the main pipeline at K=1
             (by construction, not a separate code path)
  edify      pooled-image cascade: each scale k models a flow between
             pooled noise and a time-varying data mean at resolution
             size/2^k, with explicit renoising jumps between segments
             at sampling time
  pyramidal  stagewise flow on [0,1] tiles with an upsample-plus-renoise
             jump between stages (deterministic factor from the sampling
             noise, or a variance-matched stochastic variant)

Both baselines drive the shared transformer one scale at a time, using
that scale's expert weights plus a stage-id conditioning token, so
parameter budgets stay comparable to the multi-scale model.
"""

from dataclasses import dataclass

import numpy as np

from . import schedule
from .model import FlowState, ModelConfig, forward
from .numerics import Tensor, _down2_arr, _up2_arr
from .odesolve import OdeProblem, odeint
from .rng import Rng


def down_by(x, k):
    """k applications of 2x2 mean pooling (plain arrays)."""
    for _ in range(k):
        x = _down2_arr(x)
    return x


def up_by(x, k):
    for _ in range(k):
        x = _up2_arr(x)
    return x


# ---------------------------------------------------------------------------
# Edify-style pooled-image cascade
# ---------------------------------------------------------------------------

def _mu_linear(x1, k, t):
    return t * down_by(x1, k)


def _dmu_linear(x1, k, t):
    return down_by(x1, k)


MU_SCHEDULES = {"linear": (_mu_linear, _dmu_linear)}


@dataclass(frozen=True)
class EdifySpec:
    """Three-scale cascade knots 0 < t2 < t1 < 1 and the data-mean schedule."""

    t1: float = 2 / 3
    t2: float = 1 / 3
    mu_schedule: str = "linear"

    def __post_init__(self):
        if not 0.0 < self.t2 < self.t1 < 1.0:
            raise ValueError(f"need 0 < t2 < t1 < 1, got t1={self.t1}, t2={self.t2}")
        if self.mu_schedule not in MU_SCHEDULES:
            raise ValueError(f"unknown mu schedule '{self.mu_schedule}'")

    @property
    def K(self):
        return 3

    @property
    def knots(self):
        return (1.0, self.t1, self.t2, 0.0)

    def start_time(self, k):
        return self.knots[k + 1]


def edify_state_and_velocity(x1, x0_full, k, t, spec: EdifySpec):
    """Noisy pooled state and its exact time derivative for scale k.

    state = (1 - t) * down(x0, 2^k) + mu_k(x1, t); the velocity is
    -down(x0, 2^k) + dmu_k/dt. Arrays in, arrays out; t scalar or [B].
    """
    lo, hi = spec.start_time(k), 1.0
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < lo - 1e-12) or np.any(t_arr > hi + 1e-12):
        raise ValueError(f"t={t} outside [{lo}, 1] for edify scale {k}")
    mu, dmu = MU_SCHEDULES[spec.mu_schedule]
    tb = t_arr.reshape((-1,) + (1,) * (x1.ndim - 1)) if t_arr.ndim else t_arr
    pooled_noise = down_by(x0_full, k)
    x_t = (1.0 - tb) * pooled_noise + mu(x1, k, tb)
    u = -pooled_noise + dmu(x1, k, tb)
    return x_t, u


def edify_groups(x1, labels, spec: EdifySpec, cfg: ModelConfig, rng,
                 dtype=np.float32):
    """Training-batch builder: one stage per sample, grouped by stage."""
    b = x1.shape[0]
    x0 = rng.stream("noise").normal(x1.shape, dtype=np.float64)
    st = rng.stream("stage_time")
    k_draw = st.integers(0, spec.K, (b,))
    starts = np.asarray(spec.knots)[k_draw + 1]
    t = starts + (1.0 - starts) * st.uniform(0.0, 1.0, (b,))

    groups = []
    for k_val in np.unique(k_draw):
        idx = np.nonzero(k_draw == k_val)[0]
        x_t, u = edify_state_and_velocity(x1[idx].astype(np.float64), x0[idx],
                                          int(k_val), t[idx], spec)
        state = FlowState(tensors={int(k_val): Tensor(x_t.astype(dtype))},
                          t=t[idx],
                          label=None if labels is None else labels[idx],
                          stage=int(k_val))
        groups.append((state, {int(k_val): Tensor(u.astype(dtype))}, len(idx)))
    return groups, k_draw, t


def _single_scale_velocity(params, cfg, k, label=None):
    dtype = params["time.w1"].dtype

    def f(t, y):
        b = y.shape[0]
        st = FlowState(tensors={k: Tensor(y.astype(dtype))},
                       t=np.full(b, t), label=label, stage=k)
        v = forward(params, cfg, st, check_contract=False)
        return v[k].data.astype(np.float64)

    return f


def edify_sample(params, cfg: ModelConfig, spec: EdifySpec, n, rng,
                 solver="dopri5", rtol=1e-5, atol=1e-5, steps=100, label=None):
    """Coarse-to-fine sampling with the explicit renoise jumps.

    Returns (images, info). The output is the finest-scale terminal state
    directly (states are pooled images, not residuals).
    """
    shape = (n, cfg.channels, cfg.input_size, cfg.input_size)
    x0 = rng.stream("noise").normal(shape, dtype=np.float64)
    knots = spec.knots
    segments = []
    state = down_by(x0, spec.K - 1)
    for k in range(spec.K - 1, -1, -1):
        if k < spec.K - 1:
            t_enter = knots[k + 1]
            state = up_by(state, 1) + (1.0 - t_enter) * (
                down_by(x0, k) - up_by(down_by(x0, k + 1), 1))
        t0, t1 = knots[k + 1], knots[k]
        if t1 <= t0:
            continue
        f = _single_scale_velocity(params, cfg, k, label=label)
        result = odeint(OdeProblem(f=f, t_start=t0, t_end=t1, y0=state,
                                   solver=solver, rtol=rtol, atol=atol,
                                   steps=steps))
        state = result.y
        segments.append({"segment": k, "t0": t0, "t1": t1, "nfe": result.nfe})
    info = {"segments": segments,
            "nfe_total": int(sum(s["nfe"] for s in segments))}
    return state, info


# ---------------------------------------------------------------------------
# pyramidal stagewise flow
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PyramidalSpec:
    """K stages tiling [0,1]: stage k runs on [s_k, e_k] with s_{k-1} = e_k."""

    K: int = 2
    boundaries: tuple = ()   # interior stage boundaries, finest first

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("need K >= 1")
        bounds = tuple(float(b) for b in self.boundaries) or tuple(
            (self.K - i) / self.K for i in range(1, self.K))
        object.__setattr__(self, "boundaries", bounds)
        knots = self.knots
        if len(bounds) != self.K - 1 or any(
                a <= b for a, b in zip(knots[:-1], knots[1:])):
            raise ValueError(f"boundaries {bounds} do not tile [0,1] into {self.K} stages")

    @property
    def knots(self):
        return (1.0,) + self.boundaries + (0.0,)

    def stage_times(self, k):
        """(s_k, e_k) for stage k; stages are contiguous and non-overlapping."""
        return self.knots[k + 1], self.knots[k]


def pf_train_targets(x1, x0_full, k, t, spec: PyramidalSpec):
    """Stage-k interpolation state and its constant segment velocity.

    Endpoints: x_s = s_k * up(down(x1, 2^{k+1})) + (1-s_k) * x0_k and
    x_e = e_k * down(x1, 2^k) + (1-e_k) * x0_k with x0_k = down(x0, 2^k);
    the state is the affine interpolation between them and the target its
    exact (constant) derivative.
    """
    s_k, e_k = spec.stage_times(k)
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < s_k - 1e-12) or np.any(t_arr > e_k + 1e-12):
        raise ValueError(f"t={t} outside stage {k} window [{s_k}, {e_k}]")
    x0_k = down_by(x0_full, k)
    x_s = s_k * up_by(down_by(x1, k + 1), 1) + (1.0 - s_k) * x0_k
    x_e = e_k * down_by(x1, k) + (1.0 - e_k) * x0_k
    tb = t_arr.reshape((-1,) + (1,) * (x1.ndim - 1)) if t_arr.ndim else t_arr
    span = e_k - s_k
    x_t = ((e_k - tb) * x_s + (tb - s_k) * x_e) / span
    u = (x_e - x_s) / span
    return x_t, u


def pf_groups(x1, labels, spec: PyramidalSpec, cfg: ModelConfig, rng,
              dtype=np.float32):
    b = x1.shape[0]
    x0 = rng.stream("noise").normal(x1.shape, dtype=np.float64)
    st = rng.stream("stage_time")
    k_draw = st.integers(0, spec.K, (b,))
    lo = np.asarray(spec.knots)[k_draw + 1]
    hi = np.asarray(spec.knots)[k_draw]
    t = lo + (hi - lo) * st.uniform(0.0, 1.0, (b,))

    groups = []
    for k_val in np.unique(k_draw):
        idx = np.nonzero(k_draw == k_val)[0]
        x_t, u = pf_train_targets(x1[idx].astype(np.float64), x0[idx],
                                  int(k_val), t[idx], spec)
        state = FlowState(tensors={int(k_val): Tensor(x_t.astype(dtype))},
                          t=t[idx],
                          label=None if labels is None else labels[idx],
                          stage=int(k_val))
        groups.append((state, {int(k_val): Tensor(u.astype(dtype))}, len(idx)))
    return groups, k_draw, t


def variance_matched_noise(rng, shape):
    """Unit-variance noise whose 2x2 block sums are exactly zero.

    Realized as sqrt(4/3) * (eps - up(down(eps))): removing each block's
    mean leaves per-pixel variance 3/4, which the factor restores to 1.
    """
    eps = rng.normal(shape, dtype=np.float64)
    return np.sqrt(4.0 / 3.0) * (eps - up_by(down_by(eps, 1), 1))


def pf_jump(x_end_k, x0_full, k, s_prev, rng=None, mode="algorithmic"):
    """Upsample the stage-k terminal state and renoise it for stage k-1.

    algorithmic: adds (1 - s_{k-1}) * (down(x0, 2^{k-1}) - up(down(x0, 2^k)))
    built from the sampling noise itself. variance_matched: adds
    (1 - s_{k-1}) * sqrt(3/4^k) * m with m fresh zero-block-sum noise, which
    matches the second moments of the next stage's training start point.
    """
    if k < 1:
        raise ValueError("jumps go from stage k >= 1 to k-1")
    up_state = up_by(x_end_k, 1)
    if mode == "algorithmic":
        n_k = (1.0 - s_prev) * (down_by(x0_full, k - 1) - up_by(down_by(x0_full, k), 1))
        return up_state + n_k
    if mode == "variance_matched":
        if rng is None:
            raise ValueError("variance_matched jumps need an rng")
        alpha = np.sqrt(3.0 / 4.0 ** k)
        m = variance_matched_noise(rng, up_state.shape)
        return up_state + (1.0 - s_prev) * alpha * m
    raise ValueError(f"unknown jump mode '{mode}'")


def pf_sample(params, cfg: ModelConfig, spec: PyramidalSpec, n, rng,
              solver="dopri5", rtol=1e-5, atol=1e-5, steps=100, label=None,
              jump_mode="algorithmic"):
    """Stage-by-stage sampling with renoising jumps between stages."""
    shape = (n, cfg.channels, cfg.input_size, cfg.input_size)
    x0 = rng.stream("noise").normal(shape, dtype=np.float64)
    coarse_shape = (n, cfg.channels,
                    cfg.input_size >> (spec.K - 1), cfg.input_size >> (spec.K - 1))
    state = rng.stream("start").normal(coarse_shape, dtype=np.float64) \
        / (2.0 ** (spec.K - 1))
    segments = []
    for k in range(spec.K - 1, -1, -1):
        s_k, e_k = spec.stage_times(k)
        f = _single_scale_velocity(params, cfg, k, label=label)
        result = odeint(OdeProblem(f=f, t_start=s_k, t_end=e_k, y0=state,
                                   solver=solver, rtol=rtol, atol=atol,
                                   steps=steps))
        state = result.y
        segments.append({"segment": k, "t0": s_k, "t1": e_k, "nfe": result.nfe})
        if k >= 1:
            state = pf_jump(state, x0, k, spec.stage_times(k - 1)[0],
                            rng=rng.stream("jump", k), mode=jump_mode)
    info = {"segments": segments,
            "nfe_total": int(sum(s["nfe"] for s in segments))}
    return state, info
