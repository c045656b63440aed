"""Per-scale interpolation schedules and stage/time sampling.

Scale k lives on the time window [T_{k+1}, 1], where the critical points
partition [0, 1]:

    0 = T_K < T_{K-1} < ... < T_1 < T_0 = 1

Its noisy state interpolates clean residual x1 against noise residual x0,

    x_t = alpha(t) * x1 + sigma(t) * x0,

with alpha rising from 0 at T_{k+1} to 1 at t=1 and sigma falling to 0 at
t=1. The training target is the exact time derivative of that path.
Supported coefficient families: a linear pair, a sinusoidal
variance-preserving pair (gvp), and quadratic/cubic noise decays paired
with the linear alpha.
"""

import math
from dataclasses import dataclass

import numpy as np

from .numerics import Tensor, add, mul

PATHS = ("linear", "gvp", "poly2", "poly3")


@dataclass(frozen=True)
class ScheduleSpec:
    """Scale count, interior critical times (finest first), and path family."""

    K: int
    critical_times: tuple = ()
    path: str = "linear"

    def __post_init__(self):
        if self.K < 1:
            raise ValueError(f"K must be >= 1, got {self.K}")
        if self.path not in PATHS:
            raise ValueError(f"unknown path '{self.path}', expected one of {PATHS}")
        times = tuple(float(t) for t in self.critical_times)
        object.__setattr__(self, "critical_times", times)
        if len(times) != self.K - 1:
            raise ValueError(
                f"K={self.K} needs {self.K - 1} interior critical times, got {len(times)}")
        knots = self.knots
        for a, b in zip(knots[:-1], knots[1:]):
            if not a > b:
                raise ValueError(
                    f"critical times must satisfy 1 > T_1 > ... > T_(K-1) > 0, got {times}")

    @property
    def knots(self):
        """Full knot vector (T_0=1, interior, T_K=0), decreasing."""
        return (1.0,) + self.critical_times + (0.0,)

    def start_time(self, k):
        """T_{k+1}: the time at which scale k becomes active."""
        return self.knots[k + 1]

    def segment(self, j):
        """Sampling segment j covers [T_{j+1}, T_j] with scales {j..K-1} active."""
        return self.knots[j + 1], self.knots[j]


def default_critical_times(K):
    """Evenly spaced knots; reproduces T=0.5 at K=2 and (2/3, 1/3) at K=3."""
    return tuple((K - i) / K for i in range(1, K))


@dataclass
class PathCoeffs:
    """alpha/sigma and their time derivatives at one (scale, time) query.

    Fields are scalars or arrays (vectorized over t).
    """

    alpha: object
    sigma: object
    dalpha: object
    dsigma: object


def coeffs(spec: ScheduleSpec, k: int, t) -> PathCoeffs:
    """Interpolation coefficients for scale k at time(s) t in [T_{k+1}, 1]."""
    t = np.asarray(t, dtype=np.float64)
    ts = spec.start_time(k)
    if np.any(t < ts - 1e-12) or np.any(t > 1.0 + 1e-12):
        raise ValueError(
            f"time {t} outside the active window [{ts}, 1] of scale {k}")
    span = 1.0 - ts
    alpha = (t - ts) / span
    dalpha = np.full_like(t, 1.0 / span)
    if spec.path == "linear":
        sigma = 1.0 - t
        dsigma = np.full_like(t, -1.0)
    elif spec.path == "gvp":
        alpha = np.sin(0.5 * math.pi * (t - ts) / span)
        dalpha = (0.5 * math.pi / span) * np.cos(0.5 * math.pi * (t - ts) / span)
        sigma = np.cos(0.5 * math.pi * t)
        dsigma = -0.5 * math.pi * np.sin(0.5 * math.pi * t)
    elif spec.path == "poly2":
        sigma = (1.0 - t) ** 2
        dsigma = -2.0 * (1.0 - t)
    elif spec.path == "poly3":
        sigma = (1.0 - t) ** 3
        dsigma = -3.0 * (1.0 - t) ** 2
    else:  # pragma: no cover - guarded by ScheduleSpec
        raise ValueError(spec.path)
    if t.ndim == 0:
        return PathCoeffs(float(alpha), float(sigma), float(dalpha), float(dsigma))
    return PathCoeffs(alpha, sigma, dalpha, dsigma)


def _as_coef(c, like: Tensor):
    """Broadcast a scalar-or-[B] coefficient against a [B, ...] tensor."""
    arr = np.asarray(c, dtype=like.dtype)
    if arr.ndim == 0:
        return float(arr)
    return arr.reshape((-1,) + (1,) * (len(like.shape) - 1))


def noisy_state(x1_k: Tensor, x0_k: Tensor, c: PathCoeffs) -> Tensor:
    """alpha * x1 + sigma * x0 for one scale."""
    if x1_k.shape != x0_k.shape:
        raise ValueError(f"shape mismatch {x1_k.shape} vs {x0_k.shape}")
    return add(mul(x1_k, _as_coef(c.alpha, x1_k)), mul(x0_k, _as_coef(c.sigma, x0_k)))


def velocity_target(x1_k: Tensor, x0_k: Tensor, c: PathCoeffs) -> Tensor:
    """Exact time derivative of the noisy state: dalpha * x1 + dsigma * x0."""
    if x1_k.shape != x0_k.shape:
        raise ValueError(f"shape mismatch {x1_k.shape} vs {x0_k.shape}")
    return add(mul(x1_k, _as_coef(c.dalpha, x1_k)), mul(x0_k, _as_coef(c.dsigma, x0_k)))


def sample_stage_time(rng, spec: ScheduleSpec, n=None):
    """Draw training stage(s) s ~ U{0..K-1} and time(s) t ~ U[T_{s+1}, 1].

    Because the knots decrease with index, t >= T_{k+1} holds for every
    scale k >= s that receives loss at this draw. Returns scalars for
    n=None, else arrays of length n.
    """
    count = 1 if n is None else int(n)
    s = rng.integers(0, spec.K, (count,))
    starts = np.asarray(spec.knots)[s + 1]
    t = starts + (1.0 - starts) * rng.uniform(0.0, 1.0, (count,))
    if n is None:
        return int(s[0]), float(t[0])
    return s, t
