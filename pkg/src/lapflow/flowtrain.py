"""Progressive multi-stage training.

Each step draws, per sample, a stage s uniform over the scales and a time
t uniform on [T_{s+1}, 1]; scales k >= s receive a velocity-regression
loss at that time. Samples sharing a stage are forwarded together (the
active-scale set is a property of the whole sub-batch), and the per-group
losses are averaged back into one scalar per step.

The optimizer is AdamW with decoupled weight decay (off by default); an
EMA shadow of the parameters is maintained for sampling.
"""

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from . import pyramid, schedule
from .kernels import active as K
from .model import FlowState, ModelConfig, forward, init_params
from .numerics import Tape, Tensor, backward
from .rng import Rng


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss; carries (step, stages, times)."""

    def __init__(self, step, stages, times, detail=""):
        self.step = step
        self.stages = stages
        self.times = times
        super().__init__(
            f"non-finite loss at step {step} (stages={stages}, times={times}) {detail}")


@dataclass
class TrainConfig:
    batch_size: int = 16
    steps: int = 1000
    lr: float = 2e-4
    lr_schedule: str = "cosine"        # constant | cosine
    final_lr: float = 1e-6
    ema_decay: float = 0.9999
    weight_decay: float = 0.0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    loss_weights: tuple = None         # per-scale w_k, finest first; None = ones
    loss_reduction: str = "mean"       # mean | sum over elements per scale
    grad_clip: float = 0.0             # global-norm clip; 0 disables
    cfg_dropout: float = 0.1           # label-drop probability (conditional)
    seed: int = 0
    log_every: int = 100
    ckpt_every: int = 0                # extra periodic checkpoints; 0 = final only

    def __post_init__(self):
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError(f"ema_decay must be in [0, 1), got {self.ema_decay}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_schedule '{self.lr_schedule}'")
        if self.loss_reduction not in ("mean", "sum"):
            raise ValueError(f"unknown loss_reduction '{self.loss_reduction}'")


def cosine_lr(step, total, init, final):
    """Cosine annealing from init (step 0) to final (step == total)."""
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    return final + (init - final) * (1.0 + math.cos(math.pi * step / total)) / 2.0


def lr_at(tcfg: TrainConfig, step):
    if tcfg.lr_schedule == "constant":
        return tcfg.lr
    return cosine_lr(step, tcfg.steps, tcfg.lr, tcfg.final_lr)


def loss_mv(pred, target, weights=None, reduction="mean"):
    """Weighted multi-scale velocity loss.

    pred/target map scale -> Tensor of equal shape; each scale contributes
    w_k times its per-element mean (or sum) of squared error.
    """
    if set(pred.keys()) != set(target.keys()):
        raise ValueError(f"scale sets differ: {sorted(pred)} vs {sorted(target)}")
    total = None
    for k in sorted(pred.keys()):
        if pred[k].shape != target[k].shape:
            raise ValueError(f"scale {k}: shape {pred[k].shape} vs {target[k].shape}")
        diff = nm.sub(pred[k], target[k])
        sq = nm.mul(diff, diff)
        term = nm.tmean(sq) if reduction == "mean" else nm.tsum(sq)
        w = 1.0 if weights is None else float(weights[k])
        if w != 1.0:
            term = nm.mul(term, w)
        total = term if total is None else nm.add(total, term)
    return total


class AdamW:
    """Decoupled-weight-decay Adam over a named parameter dict."""

    def __init__(self, params, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {n: np.zeros_like(t.data) for n, t in params.items()}
        self.v = {n: np.zeros_like(t.data) for n, t in params.items()}

    def step(self, params, grads, lr):
        """One update; grads maps Tensor -> array (missing entries = zero)."""
        self.step_count += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for name, t in params.items():
            g = grads.get(t)
            if g is None:
                g = np.zeros_like(t.data)
            K.adamw_update(t.data.reshape(-1), np.ascontiguousarray(g.reshape(-1)),
                           self.m[name].reshape(-1), self.v[name].reshape(-1),
                           lr, b1, b2, self.eps, self.weight_decay, bc1, bc2)


def ema_update(shadow, params, decay):
    """shadow <- decay * shadow + (1 - decay) * params, in place."""
    for name, t in params.items():
        s = shadow[name]
        s *= decay
        s += (1.0 - decay) * t.data


def clip_grads(grads, max_norm):
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm > 0:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= scale
    return total


# ---------------------------------------------------------------------------
# per-method batch construction
# ---------------------------------------------------------------------------

def lapflow_groups(x1, labels, spec, cfg, rng, dtype=np.float32,
                   independent_scale_noise=False):
    """Noisy states and velocity targets for one training batch.

    Draws one (stage, time) pair per sample, groups samples by stage (the
    active-scale set is per-group), and returns
    [(FlowState, targets, n_samples)]. Also returns the drawn stages/times
    for logging and divergence diagnostics.
    """
    b = x1.shape[0]
    pyr1 = pyramid.decompose(Tensor(x1.astype(dtype)), spec.K)
    pyr0 = pyramid.noise_pyramid(rng.stream("noise"), x1.shape, spec.K,
                                 independent_scale_noise=independent_scale_noise,
                                 dtype=dtype)
    s, t = schedule.sample_stage_time(rng.stream("stage_time"), spec, n=b)

    groups = []
    for s_val in np.unique(s):
        idx = np.nonzero(s == s_val)[0]
        tensors, targets = {}, {}
        for k in range(spec.K - 1, int(s_val) - 1, -1):
            c = schedule.coeffs(spec, k, t[idx])
            x1k = Tensor(pyr1[k].data[idx])
            x0k = Tensor(pyr0[k].data[idx])
            tensors[k] = schedule.noisy_state(x1k, x0k, c)
            targets[k] = schedule.velocity_target(x1k, x0k, c)
        lab = None if labels is None else labels[idx]
        state = FlowState(tensors=tensors, t=t[idx], label=lab)
        groups.append((state, targets, len(idx)))
    return groups, s, t


@dataclass
class TrainState:
    params: dict
    opt: AdamW
    ema: dict
    step: int = 0
    last_stage_hist: tuple = ()

    def ema_params(self):
        return {n: Tensor(a.copy()) for n, a in self.ema.items()}


def init_train_state(cfg: ModelConfig, tcfg: TrainConfig, dtype=np.float32) -> TrainState:
    params = init_params(cfg, Rng(tcfg.seed).stream("model"), dtype=dtype)
    opt = AdamW(params, betas=tcfg.betas, eps=tcfg.eps,
                weight_decay=tcfg.weight_decay)
    ema = {n: t.data.copy() for n, t in params.items()}
    return TrainState(params=params, opt=opt, ema=ema)


def train_step(ts: TrainState, x1, labels, cfg: ModelConfig, spec,
               tcfg: TrainConfig, group_fn=lapflow_groups, check_contract=True):
    """One optimizer step; returns the scalar loss value."""
    rng = Rng(tcfg.seed).stream("train", ts.step)
    if labels is not None and tcfg.cfg_dropout > 0:
        from .sampler import train_cfg_dropout
        labels = train_cfg_dropout(labels, rng.stream("drop"), tcfg.cfg_dropout,
                                   cfg.null_label)
    b = x1.shape[0]
    try:
        groups, s, t = group_fn(x1, labels, spec, cfg, rng)
        with Tape() as tape:
            tape.watch(ts.params.values())
            loss = None
            for state, targets, n in groups:
                pred = forward(ts.params, cfg, state,
                               check_contract=check_contract)
                part = nm.mul(loss_mv(pred, targets, tcfg.loss_weights,
                                      tcfg.loss_reduction), n / b)
                loss = part if loss is None else nm.add(loss, part)
        loss_val = float(loss.data)
        if not math.isfinite(loss_val):
            raise FloatingPointError("loss is not finite")
        grads = backward(tape, loss)
    except FloatingPointError as exc:
        raise DivergenceError(ts.step, *_diag(locals()), detail=str(exc)) from exc
    if tcfg.grad_clip > 0:
        clip_grads(grads, tcfg.grad_clip)
    ts.opt.step(ts.params, grads, lr_at(tcfg, ts.step))
    ema_update(ts.ema, ts.params, tcfg.ema_decay)
    ts.step += 1
    hist = np.bincount(np.asarray(s).reshape(-1), minlength=spec.K)
    ts.last_stage_hist = tuple(int(c) for c in hist)
    return loss_val


def _diag(scope):
    s = scope.get("s")
    t = scope.get("t")
    fmt = lambda a: None if a is None else np.round(np.asarray(a), 4).tolist()
    return fmt(s), fmt(t)


def train_loop(cfg: ModelConfig, spec, tcfg: TrainConfig, images, labels=None,
               group_fn=lapflow_groups, check_contract=True, log_path=None,
               on_checkpoint=None, progress=None):
    """Run tcfg.steps optimizer steps over an in-memory dataset.

    images: [N, C, H, W] float array in [-1, 1]; labels: optional [N] ints.
    Writes a step,loss,lr,stage_histogram CSV when log_path is given and
    calls on_checkpoint(train_state) at ckpt_every intervals and at the end.
    """
    ts = init_train_state(cfg, tcfg)
    n = images.shape[0]
    writer = None
    log_file = None
    if log_path is not None:
        log_file = open(log_path, "w", newline="")
        writer = csv.writer(log_file)
        writer.writerow(["step", "loss", "lr", "stage_histogram"])
    try:
        for step in range(tcfg.steps):
            idx = Rng(tcfg.seed).stream("batch", step).integers(0, n, (tcfg.batch_size,))
            x1 = images[idx]
            lab = None if labels is None else labels[idx]
            loss = train_step(ts, x1, lab, cfg, spec, tcfg, group_fn=group_fn,
                              check_contract=check_contract)
            if writer and (step % tcfg.log_every == 0 or step == tcfg.steps - 1):
                writer.writerow([step, f"{loss:.6g}", f"{lr_at(tcfg, step):.6g}",
                                 "|".join(map(str, ts.last_stage_hist))])
            if progress and (step % tcfg.log_every == 0 or step == tcfg.steps - 1):
                progress(step, loss)
            if on_checkpoint and tcfg.ckpt_every and (step + 1) % tcfg.ckpt_every == 0:
                on_checkpoint(ts)
    finally:
        if log_file:
            log_file.close()
    if on_checkpoint:
        on_checkpoint(ts)
    return ts
