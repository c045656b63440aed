"""Segmented multi-scale sampling.

Generation runs the learned velocity field through K time segments,
coarsest scale first. Segment j integrates scales {j..K-1} over
[T_{j+1}, T_j]; the newly activated scale j enters at exactly
sigma_j(T_{j+1}) * x0_j (its interpolation path evaluated at its start
time), while already-active scales carry their states across the boundary
unchanged — there is no renoising or bridging between segments. After the
final segment the per-scale states are residuals at t=1 and the image is
their pyramid reconstruction.

Classifier-free guidance runs two forwards per evaluation (null label and
requested label) and extrapolates v_null + w * (v_label - v_null).
"""

import time
from dataclasses import dataclass

import numpy as np

from . import pyramid, schedule
from .model import FlowState, ModelConfig, forward
from .numerics import Tensor
from .odesolve import OdeProblem, odeint
from .schedule import ScheduleSpec


@dataclass
class SampleConfig:
    count: int = 16
    seed: int = 0
    cfg_scale: float = 1.0         # 1 = guidance off
    label: object = None           # int or [count] list (conditional models)
    solver: str = "dopri5"
    rtol: float = 1e-5
    atol: float = 1e-5
    steps: int = 100               # fixed-step solvers
    use_ema: bool = True

    def __post_init__(self):
        if self.cfg_scale < 1.0:
            raise ValueError(f"cfg_scale must be >= 1, got {self.cfg_scale}")


def train_cfg_dropout(label, rng, p_drop, null_id):
    """Replace labels with the null id with probability p_drop."""
    label = np.asarray(label)
    if p_drop <= 0:
        return label
    drop = rng.uniform(0.0, 1.0, label.shape) < p_drop
    return np.where(drop, null_id, label)


def cfg_velocity(params, cfg: ModelConfig, state: FlowState, w: float):
    """Guided velocities: v_null + w * (v_label - v_null), per scale.

    w == 1 short-circuits to a single conditional forward, so guidance off
    is bit-identical to plain conditional sampling.
    """
    if not cfg.conditional:
        raise ValueError("classifier-free guidance needs a conditional model")
    if state.label is None:
        raise ValueError("cfg_velocity needs a label on the flow state")
    if w == 1.0:
        return forward(params, cfg, state, check_contract=False)
    v_lab = forward(params, cfg, state, check_contract=False)
    null_state = FlowState(tensors=state.tensors, t=state.t,
                           label=np.full(state.batch, cfg.null_label),
                           stage=state.stage)
    v_null = forward(params, cfg, null_state, check_contract=False)
    return {k: Tensor(v_null[k].data + w * (v_lab[k].data - v_null[k].data))
            for k in v_lab}


def flatten_states(states, order):
    """Concatenate per-scale arrays into one [B, D] vector; returns slices."""
    parts, slices, off = [], {}, 0
    b = states[order[0]].shape[0]
    for k in order:
        a = states[k].reshape(b, -1)
        slices[k] = (off, off + a.shape[1], states[k].shape)
        off += a.shape[1]
        parts.append(a)
    return np.concatenate(parts, axis=1), slices


def unflatten_states(y, slices):
    return {k: y[:, a:bnd].reshape(shape) for k, (a, bnd, shape) in slices.items()}


def velocity_fn(params, cfg: ModelConfig, slices, label=None, cfg_scale=1.0,
                stage=None, dtype=np.float32):
    """Wrap the model as f(t, y) over the flattened multi-scale state."""

    def f(t, y):
        states = unflatten_states(y, slices)
        tensors = {k: Tensor(v.astype(dtype)) for k, v in states.items()}
        b = y.shape[0]
        st = FlowState(tensors=tensors, t=np.full(b, t), label=label, stage=stage)
        if label is not None and cfg_scale != 1.0:
            v = cfg_velocity(params, cfg, st, cfg_scale)
        else:
            v = forward(params, cfg, st, check_contract=False)
        return np.concatenate(
            [v[k].data.reshape(b, -1).astype(np.float64) for k in slices], axis=1)

    return f


def generate(params, cfg: ModelConfig, spec: ScheduleSpec, scfg: SampleConfig,
             rng, independent_scale_noise=False):
    """Sample scfg.count images; returns (images [n,C,H,W], info dict).

    info records per-segment NFE/accept/reject counts and wall time; total
    NFE is their sum.
    """
    n = scfg.count
    shape = (n, cfg.channels, cfg.input_size, cfg.input_size)
    noise = pyramid.noise_pyramid(rng.stream("noise"), shape, spec.K,
                                  independent_scale_noise=independent_scale_noise,
                                  dtype=np.float64)
    label = None
    if cfg.conditional:
        if scfg.label is None:
            raise ValueError("conditional model needs a label to sample")
        label = np.broadcast_to(np.asarray(scfg.label, dtype=np.intp), (n,)).copy()
    elif scfg.label is not None:
        raise ValueError("label given but the model is unconditional")
    if scfg.cfg_scale > 1.0 and not cfg.conditional:
        raise ValueError("cfg_scale > 1 needs a conditional model")

    t_begin = time.perf_counter()
    states = {}
    segments = []
    for j in range(spec.K - 1, -1, -1):
        t0, t1 = spec.segment(j)
        # newly activated scale enters at sigma_j(T_{j+1}) * x0_j
        c = schedule.coeffs(spec, j, t0)
        states[j] = c.sigma * noise[j].data
        if t1 <= t0:        # empty segment (degenerate knots)
            continue
        order = sorted(states.keys(), reverse=True)
        y0, slices = flatten_states(states, order)
        f = velocity_fn(params, cfg, slices, label=label,
                        cfg_scale=scfg.cfg_scale,
                        dtype=params["time.w1"].dtype)
        problem = OdeProblem(f=f, t_start=t0, t_end=t1, y0=y0,
                             solver=scfg.solver, rtol=scfg.rtol,
                             atol=scfg.atol, steps=scfg.steps)
        try:
            result = odeint(problem)
        except Exception as exc:
            raise RuntimeError(f"sampling diverged in segment {j} "
                               f"[{t0:.3f}, {t1:.3f}]: {exc}") from exc
        states = unflatten_states(result.y, slices)
        segments.append({"segment": j, "t0": t0, "t1": t1, "nfe": result.nfe,
                         "accepted": result.accepted, "rejected": result.rejected})

    levels = [Tensor(states[k]) for k in range(spec.K)]
    images = pyramid.reconstruct(pyramid.Pyramid(levels)).data
    info = {
        "segments": segments,
        "nfe_total": int(sum(s["nfe"] for s in segments)),
        "wall_time_s": time.perf_counter() - t_begin,
        "solver": scfg.solver,
        "cfg_scale": scfg.cfg_scale,
    }
    return images, info
