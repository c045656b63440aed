"""ODE integration with exact function-evaluation accounting.

Three backends: fixed-step Euler and Heun, and the adaptive Dormand-Prince
4(5) pair (dopri5) with FSAL, a PI step controller, and a per-component
error scale max(atol, rtol * |y|). The velocity function f(t, y) maps an
array to an array of the same shape; integration state is treated as one
flat vector (multi-scale states are concatenated by the caller).

NFE counts every call to f. For dopri5 the initial step size is chosen
from the already-computed f(t0, y0) alone, so NFE = 1 + 6 * (accepted +
rejected) holds exactly under FSAL.
"""

import math
from dataclasses import dataclass

import numpy as np


class OdeDivergence(RuntimeError):
    """Adaptive step size underflowed; carries the last good time."""

    def __init__(self, t, h):
        self.t = t
        super().__init__(f"dopri5 step size underflow (h={h:.3e}) at t={t:.6f}")


@dataclass
class OdeProblem:
    f: object                      # callable f(t, y) -> dy/dt
    t_start: float
    t_end: float
    y0: np.ndarray
    solver: str = "dopri5"         # euler | heun | dopri5
    rtol: float = 1e-5
    atol: float = 1e-5
    steps: int = 100               # fixed-step solvers only

    def __post_init__(self):
        if not self.t_start < self.t_end:
            raise ValueError(f"need t_start < t_end, got [{self.t_start}, {self.t_end}]")
        if self.solver not in ("euler", "heun", "dopri5"):
            raise ValueError(f"unknown solver '{self.solver}'")
        if self.rtol <= 0 or self.atol <= 0:
            raise ValueError("tolerances must be positive")


@dataclass
class OdeResult:
    y: np.ndarray
    nfe: int
    accepted: int = 0
    rejected: int = 0


def odeint(problem: OdeProblem) -> OdeResult:
    if problem.solver == "euler":
        return _euler(problem)
    if problem.solver == "heun":
        return _heun(problem)
    return _dopri5(problem)


def _euler(p: OdeProblem) -> OdeResult:
    y = np.array(p.y0, dtype=np.float64, copy=True)
    h = (p.t_end - p.t_start) / p.steps
    t = p.t_start
    for i in range(p.steps):
        y = y + h * p.f(t, y)
        t = p.t_start + (i + 1) * h
    return OdeResult(y=y, nfe=p.steps, accepted=p.steps)


def _heun(p: OdeProblem) -> OdeResult:
    y = np.array(p.y0, dtype=np.float64, copy=True)
    h = (p.t_end - p.t_start) / p.steps
    t = p.t_start
    for i in range(p.steps):
        k1 = p.f(t, y)
        k2 = p.f(t + h, y + h * k1)
        y = y + 0.5 * h * (k1 + k2)
        t = p.t_start + (i + 1) * h
    return OdeResult(y=y, nfe=2 * p.steps, accepted=p.steps)


# Dormand-Prince 4(5) tableau
_C = (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0)
_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
_B5 = (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0)
_B4 = (5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40)
_E = tuple(b5 - b4 for b5, b4 in zip(_B5, _B4))

_SAFETY = 0.9
_MIN_FACTOR = 0.2
_MAX_FACTOR = 10.0
_ORDER = 5.0
_H_MIN = 1e-12


def _error_norm(err, y0, y1, rtol, atol):
    scale = np.maximum(atol, rtol * np.maximum(np.abs(y0), np.abs(y1)))
    return float(np.sqrt(np.mean((err / scale) ** 2)))


def _initial_step(f0, y0, t0, t1, rtol, atol):
    """Conservative first step from the state and slope at t0 only.

    Deliberately skips the usual second probe evaluation so the NFE
    identity 1 + 6*(accepted+rejected) stays exact; the PI controller
    recovers quickly from a too-small start.
    """
    scale = np.maximum(atol, rtol * np.abs(y0))
    d0 = float(np.sqrt(np.mean((y0 / scale) ** 2)))
    d1 = float(np.sqrt(np.mean((f0 / scale) ** 2)))
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    return min(h0, t1 - t0)


def _dopri5(p: OdeProblem) -> OdeResult:
    y = np.array(p.y0, dtype=np.float64, copy=True)
    t = p.t_start
    nfe = 1
    k1 = p.f(t, y)
    h = _initial_step(k1, y, p.t_start, p.t_end, p.rtol, p.atol)
    accepted = rejected = 0
    err_prev = 1.0
    ks = [None] * 7
    ks[0] = k1

    while t < p.t_end - 1e-14:
        h = min(h, p.t_end - t)
        if h < _H_MIN:
            raise OdeDivergence(t, h)
        for i in range(1, 7):
            yi = y
            acc = np.zeros_like(y)
            for j, a in enumerate(_A[i]):
                if a != 0.0:
                    acc = acc + a * ks[j]
            ks[i] = p.f(t + _C[i] * h, yi + h * acc)
        nfe += 6
        y5 = y + h * sum(b * k for b, k in zip(_B5, ks) if b != 0.0)
        err = h * sum(e * k for e, k in zip(_E, ks) if e != 0.0)
        norm = _error_norm(err, y, y5, p.rtol, p.atol)

        if norm <= 1.0:
            accepted += 1
            t = t + h
            y = y5
            ks[0] = ks[6]       # FSAL: stage 7 evaluates at (t+h, y5)
            # PI controller (Hairer-Norsett-Wanner II.4)
            if norm == 0.0:
                factor = _MAX_FACTOR
            else:
                factor = _SAFETY * norm ** (-0.7 / _ORDER) * err_prev ** (0.4 / _ORDER)
                factor = min(_MAX_FACTOR, max(_MIN_FACTOR, factor))
            err_prev = max(norm, 1e-4)
            h *= factor
        else:
            rejected += 1
            factor = max(_MIN_FACTOR, _SAFETY * norm ** (-1.0 / _ORDER))
            h *= factor
            # k1 is still valid at (t, y); stages 2..7 are recomputed
    return OdeResult(y=y, nfe=nfe, accepted=accepted, rejected=rejected)


def solver_agreement(problem: OdeProblem, solver_a: str, solver_b: str,
                     steps_a=None, steps_b=None) -> float:
    """Max absolute terminal deviation between two solver configurations."""
    ra = odeint(_with(problem, solver_a, steps_a))
    rb = odeint(_with(problem, solver_b, steps_b))
    return float(np.max(np.abs(ra.y - rb.y)))


def _with(p: OdeProblem, solver, steps):
    return OdeProblem(f=p.f, t_start=p.t_start, t_end=p.t_end, y0=p.y0,
                      solver=solver, rtol=p.rtol, atol=p.atol,
                      steps=p.steps if steps is None else steps)
