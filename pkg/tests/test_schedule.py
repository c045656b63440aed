"""Interpolation coefficients, path boundaries, and stage/time sampling."""

import numpy as np
import pytest

from lapflow.numerics import Tensor
from lapflow.rng import Rng
from lapflow.schedule import (PATHS, ScheduleSpec, coeffs,
                              default_critical_times, noisy_state,
                              sample_stage_time, velocity_target)


def spec_for(K, path="linear"):
    return ScheduleSpec(K=K, critical_times=default_critical_times(K), path=path)


def test_spec_ordering_enforced():
    with pytest.raises(ValueError):
        ScheduleSpec(K=3, critical_times=(0.3, 0.6))
    with pytest.raises(ValueError):
        ScheduleSpec(K=2, critical_times=(1.2,))
    with pytest.raises(ValueError):
        ScheduleSpec(K=2, critical_times=())


def test_default_times_match_known_configs():
    assert default_critical_times(2) == (0.5,)
    assert np.allclose(default_critical_times(3), (2 / 3, 1 / 3))


def test_linear_coeffs_direct_substitution():
    spec = ScheduleSpec(K=2, critical_times=(0.5,))
    c = coeffs(spec, 0, 0.75)
    assert np.isclose(c.alpha, 0.5)
    assert np.isclose(c.sigma, 0.25)
    assert np.isclose(c.dalpha, 2.0)
    assert np.isclose(c.dsigma, -1.0)


@pytest.mark.parametrize("path", PATHS)
@pytest.mark.parametrize("K", [1, 2, 3, 4])
def test_boundary_identities(path, K):
    spec = spec_for(K, path)
    for k in range(K):
        ts = spec.start_time(k)
        assert abs(coeffs(spec, k, ts).alpha) <= 1e-12
        end = coeffs(spec, k, 1.0)
        assert abs(end.alpha - 1.0) <= 1e-12
        assert abs(end.sigma) <= 1e-12


def test_coeffs_below_window_errors():
    spec = ScheduleSpec(K=2, critical_times=(0.5,))
    with pytest.raises(ValueError):
        coeffs(spec, 0, 0.4)


def test_noisy_state_terminal_is_clean():
    spec = spec_for(2)
    x1 = Tensor(np.random.randn(2, 1, 4, 4), dtype=np.float64)
    x0 = Tensor(np.random.randn(2, 1, 4, 4), dtype=np.float64)
    out = noisy_state(x1, x0, coeffs(spec, 0, 1.0))
    assert np.allclose(out.data, x1.data)


def test_noisy_state_start_is_scaled_noise():
    spec = ScheduleSpec(K=2, critical_times=(0.5,))
    x1 = Tensor(np.random.randn(1, 4, 4), dtype=np.float64)
    x0 = Tensor(np.random.randn(1, 4, 4), dtype=np.float64)
    out = noisy_state(x1, x0, coeffs(spec, 0, 0.5))
    assert np.allclose(out.data, 0.5 * x0.data)


def test_noisy_state_scalar_example():
    spec = ScheduleSpec(K=2, critical_times=(0.5,))
    out = noisy_state(Tensor([2.0], dtype=np.float64),
                      Tensor([4.0], dtype=np.float64),
                      coeffs(spec, 0, 0.75))
    assert np.isclose(out.data[0], 2.0)


def test_noisy_state_shape_mismatch():
    spec = spec_for(1)
    with pytest.raises(ValueError):
        noisy_state(Tensor(np.zeros((2, 2))), Tensor(np.zeros((3, 3))),
                    coeffs(spec, 0, 0.5))


def test_velocity_rectified_flow_special_case():
    spec = spec_for(1)  # single scale: alpha = t, sigma = 1 - t
    x1 = Tensor(np.random.randn(4), dtype=np.float64)
    x0 = Tensor(np.random.randn(4), dtype=np.float64)
    u = velocity_target(x1, x0, coeffs(spec, 0, 0.3))
    assert np.allclose(u.data, x1.data - x0.data)


def test_velocity_scalar_example():
    spec = ScheduleSpec(K=2, critical_times=(0.5,))
    u = velocity_target(Tensor([1.0], dtype=np.float64),
                        Tensor([1.0], dtype=np.float64),
                        coeffs(spec, 0, 0.8))
    assert np.isclose(u.data[0], 2.0 * 1.0 - 1.0)


@pytest.mark.parametrize("path", PATHS)
def test_velocity_matches_finite_difference(path):
    rng = Rng(17)
    h = 1e-6
    for K in (2, 3):
        spec = spec_for(K, path)
        for _ in range(25):
            k = int(rng.integers(0, K))
            ts = spec.start_time(k)
            t = float(rng.uniform(ts + 2 * h, 1.0 - 2 * h))
            x1 = Tensor(rng.normal((1, 4, 4), dtype=np.float64))
            x0 = Tensor(rng.normal((1, 4, 4), dtype=np.float64))
            u = velocity_target(x1, x0, coeffs(spec, k, t)).data
            xp = noisy_state(x1, x0, coeffs(spec, k, t + h)).data
            xm = noisy_state(x1, x0, coeffs(spec, k, t - h)).data
            fd = (xp - xm) / (2 * h)
            rel = np.max(np.abs(u - fd) / np.maximum(1.0, np.abs(u)))
            assert rel <= 1e-4, (path, K, k, t, rel)


def test_derivatives_match_fd_on_open_interval():
    for path in PATHS:
        spec = spec_for(3, path)
        h = 1e-7
        for k in range(3):
            ts = spec.start_time(k)
            for t in np.linspace(ts + 1e-3, 1 - 1e-3, 17):
                c = coeffs(spec, k, t)
                cp = coeffs(spec, k, t + h)
                cm = coeffs(spec, k, t - h)
                assert abs((cp.alpha - cm.alpha) / (2 * h) - c.dalpha) <= 1e-4 * max(1, abs(c.dalpha))
                assert abs((cp.sigma - cm.sigma) / (2 * h) - c.dsigma) <= 1e-4 * max(1, abs(c.dsigma))


def test_single_scale_reduces_to_cfm():
    spec = spec_for(1)
    for t in np.linspace(0, 1, 9):
        c = coeffs(spec, 0, t)
        assert np.isclose(c.alpha, t) and np.isclose(c.sigma, 1 - t)


def test_sample_stage_time_single_scale():
    rng = Rng(0).stream("st")
    spec = spec_for(1)
    s, t = sample_stage_time(rng, spec)
    assert s == 0 and 0.0 <= t <= 1.0


def test_sample_stage_time_law():
    # for s=0 at K=3 the time law is U[T_1, 1]
    rng = Rng(1).stream("st")
    spec = ScheduleSpec(K=3, critical_times=(0.67, 0.33))
    s, t = sample_stage_time(rng, spec, n=100_000)
    t0 = np.sort(t[s == 0])
    # Kolmogorov-Smirnov against U[0.67, 1]
    u = (t0 - 0.67) / 0.33
    n = len(u)
    dks = np.max(np.abs(u - np.arange(1, n + 1) / n))
    # 1% critical value ~ 1.63/sqrt(n)
    assert dks < 1.63 / np.sqrt(n)


def test_coarsest_scale_always_active():
    rng = Rng(2).stream("st")
    spec = spec_for(3)
    s, t = sample_stage_time(rng, spec, n=10_000)
    # scale K-1 trains whenever s <= K-1, i.e. always; its window is [0, 1]
    assert np.all(s <= spec.K - 1)
    assert np.all(t >= np.asarray(spec.knots)[s + 1] - 1e-12)


def test_vectorized_coeffs_match_scalar():
    spec = spec_for(3, "gvp")
    ts = np.array([0.5, 0.7, 0.9])
    vec = coeffs(spec, 1, ts)
    for i, t in enumerate(ts):
        one = coeffs(spec, 1, float(t))
        assert np.isclose(vec.alpha[i], one.alpha)
        assert np.isclose(vec.dsigma[i], one.dsigma)
