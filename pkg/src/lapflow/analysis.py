"""Cost models and desk-scale sample-quality metrics.

The attention-cost model time-weights the quadratic attention term over
the sampling segments: segment j runs for a fraction Delta_t_j of the ODE
trajectory with all scales k >= j active, so one layer costs
sum_j Delta_t_j * N_j^2 * d with N_j the active-token total of segment j.
The ratio against a single-scale model with the same finest token count
(N^2 d) is resolution-independent.

Sample quality at desk scale is measured with sliced Wasserstein distance
(random 1-D projections of pixel vectors) plus radial spectrum statistics
that mirror the pyramid's band structure.
"""

from dataclasses import dataclass

import numpy as np

from .model import ModelConfig
from .schedule import ScheduleSpec


@dataclass
class CostReport:
    token_totals: list        # N_j per segment, coarsest segment first
    segment_lengths: list     # Delta t_j, same order
    width: int                # d
    cost: float               # sum_j dt_j * N_j^2 * d  (MAC x time fraction)
    baseline: float           # N^2 * d
    ratio: float

    def rows(self):
        return [
            {"segment": j, "tokens": n, "dt": dt, "share": dt * n * n * self.width}
            for j, (n, dt) in enumerate(zip(self.token_totals, self.segment_lengths))
        ]


def attention_cost(n_tokens, d, spec: ScheduleSpec) -> CostReport:
    """Time-weighted attention cost of one layer over a full sampling run.

    n_tokens is the finest-scale token count N; scale k contributes
    N / 4^k tokens while active.
    """
    K = spec.K
    if n_tokens % (4 ** (K - 1)):
        raise ValueError(f"n_tokens={n_tokens} not divisible by 4^{K - 1}")
    per_scale = [n_tokens // (4 ** k) for k in range(K)]
    knots = spec.knots
    totals, lengths = [], []
    for j in range(K - 1, -1, -1):
        dt = knots[j] - knots[j + 1]
        totals.append(sum(per_scale[k] for k in range(j, K)))
        lengths.append(dt)
    cost = sum(dt * n * n * d for n, dt in zip(totals, lengths))
    baseline = float(n_tokens) ** 2 * d
    return CostReport(token_totals=totals, segment_lengths=lengths, width=d,
                      cost=float(cost), baseline=baseline,
                      ratio=float(cost) / baseline)


@dataclass
class FlopReport:
    per_segment: list         # {"segment", "dt", "macs"} per model forward
    forward_macs_full: int    # one forward with every scale active
    time_weighted_macs: float # expected per-evaluation cost over a sampling run
    attention_ratio: float

    @property
    def forward_flops_full(self):
        return 2 * self.forward_macs_full

    @property
    def time_weighted_flops(self):
        return 2.0 * self.time_weighted_macs


def _forward_macs(cfg: ModelConfig, active_scales):
    """Multiply-accumulate count of one forward over the given scales."""
    d = cfg.hidden
    pc = cfg.patch * cfg.patch * cfg.channels
    n_cond = cfg.n_cond()
    total_tokens = n_cond + sum(cfg.tokens(k) for k in active_scales)
    macs = cfg.time_freq_dim * d + d * d          # time embedder MLP
    for k in active_scales:
        n_k = cfg.tokens(k)
        macs += n_k * pc * d                      # patch embed
        macs += n_k * pc * d                      # linear decode
        macs += d * 2 * d                         # final modulation
    for _ in range(cfg.depth):
        for k in active_scales:
            n_k = cfg.tokens(k)
            g = n_k + (n_cond if k == max(active_scales) else 0)
            macs += d * 6 * d                     # block modulation
            macs += 3 * g * d * d                 # QKV
            macs += g * d * d                     # output projection
            macs += 2 * g * d * cfg.mlp_ratio * d # FFN
        macs += 2 * total_tokens * total_tokens * d  # scores + weighted sum
    return macs


def model_flops(cfg: ModelConfig, spec: ScheduleSpec) -> FlopReport:
    """Per-segment and time-weighted forward cost of the velocity network."""
    knots = spec.knots
    rows = []
    weighted = 0.0
    for j in range(spec.K - 1, -1, -1):
        dt = knots[j] - knots[j + 1]
        macs = _forward_macs(cfg, list(range(j, spec.K)))
        rows.append({"segment": j, "dt": dt, "macs": int(macs)})
        weighted += dt * macs
    full = _forward_macs(cfg, list(range(spec.K)))
    ar = attention_cost(cfg.tokens(0), cfg.hidden, spec).ratio
    return FlopReport(per_segment=rows, forward_macs_full=int(full),
                      time_weighted_macs=weighted, attention_ratio=ar)


# ---------------------------------------------------------------------------
# sample metrics
# ---------------------------------------------------------------------------

def sliced_wasserstein(set_a, set_b, n_proj=128, rng=None):
    """Mean 1-D Wasserstein-1 distance over random unit projections.

    Both sets are [n, ...] arrays of identically shaped images; each image
    flattens to one vector. With equal sample counts the 1-D distance is
    the mean absolute difference of sorted projections; unequal counts use
    a common quantile grid.
    """
    a = np.asarray(set_a, dtype=np.float64).reshape(len(set_a), -1)
    b = np.asarray(set_b, dtype=np.float64).reshape(len(set_b), -1)
    if a.size == 0 or b.size == 0:
        raise ValueError("empty sample set")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"image sizes differ: {a.shape[1]} vs {b.shape[1]}")
    if rng is None:
        from .rng import Rng
        rng = Rng(0).stream("swd")
    dirs = rng.normal((n_proj, a.shape[1]), dtype=np.float64)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    pa = a @ dirs.T   # [n_a, n_proj]
    pb = b @ dirs.T
    pa.sort(axis=0)
    pb.sort(axis=0)
    if pa.shape[0] == pb.shape[0]:
        return float(np.mean(np.abs(pa - pb)))
    q = (np.arange(1, 2 * max(len(a), len(b)) + 1) - 0.5) / (2 * max(len(a), len(b)))
    dist = 0.0
    for j in range(n_proj):
        qa = np.quantile(pa[:, j], q, method="inverted_cdf")
        qb = np.quantile(pb[:, j], q, method="inverted_cdf")
        dist += np.mean(np.abs(qa - qb))
    return float(dist / n_proj)


def spectrum_stats(images, levels=None):
    """Mean squared FFT magnitude per radial band, lowest band first.

    Bands follow the pyramid's dyadic structure: band 0 holds radii up to
    size / 2^levels (including DC), each following band doubles the radius
    range, and the last band collects everything up to the corner
    frequencies. Returns an array of per-band means of |F|^2 averaged over
    the batch.
    """
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 3:
        x = x[:, None]
    n, c, h, w = x.shape
    if h != w:
        raise ValueError(f"square images required, got {h}x{w}")
    if levels is None:
        levels = max(1, int(np.log2(h)))
    power = np.abs(np.fft.fft2(x, axes=(-2, -1))) ** 2
    power = power.mean(axis=(0, 1))
    fy = np.fft.fftfreq(h) * h
    fx = np.fft.fftfreq(w) * w
    r = np.sqrt(fy[:, None] ** 2 + fx[None, :] ** 2)
    edges = [0.0] + [h / 2 ** (levels - i) for i in range(levels)]
    edges[-1] = np.inf
    out = np.zeros(levels)
    for i in range(levels):
        if i == 0:
            sel = r <= edges[1]
        else:
            sel = (r > edges[i]) & (r <= edges[i + 1])
        out[i] = power[sel].mean() if sel.any() else 0.0
    return out
