import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from polaris_lab.errors import ConfigError, IllPosedStateError, ScheduleLengthError
from polaris_lab.guidance import (
    EXACT_DELTA_CLAMP,
    CosineDecay,
    ExactSolverState,
    Fixed,
    PolarisExact,
    PolarisRobust,
    PredictionDelta,
    RandomUniform,
    Replay,
    ScaleSchedule,
    cfg_combine,
    exact_state,
    next_scale,
    polaris_exact_delta,
    polaris_robust_scale,
    tau_approx,
)
from polaris_lab.oracle import PredictionPair

GRID_POINTS = 1_000_000


def grid_argmin_quadratic(c2, c1, c0, lo, hi, n=GRID_POINTS):
    """Brute-force minimiser of c2 w^2 + c1 w + c0 over an evenly spaced grid."""
    w = np.linspace(lo, hi, n)
    vals = (c2 * w + c1) * w + c0
    return w[np.argmin(vals)], w[1] - w[0]


def pair(u, c, t=0):
    return PredictionPair(np.asarray(u, float), np.asarray(c, float), t)


def test_cfg_endpoints():
    p = pair([1.0, 2.0], [3.0, -1.0])
    np.testing.assert_array_equal(cfg_combine(p, 0.0), p.eps_uncond)
    np.testing.assert_array_equal(cfg_combine(p, 1.0), p.eps_cond)


def test_cfg_high_scale_hand_value():
    np.testing.assert_allclose(cfg_combine(pair([1, 0], [0, 1]), 7.5), [-6.5, 7.5], atol=0)


def test_robust_static_conditional():
    v = np.array([0.3, -0.4, 1.2])
    w = polaris_robust_scale(PredictionDelta(v, np.zeros(3)), 1e-8)
    assert w == pytest.approx(v @ v / (v @ v + 1e-8), rel=1e-15)
    assert w == pytest.approx(1.0, abs=1e-7)


def test_robust_static_unconditional():
    assert polaris_robust_scale(PredictionDelta(np.zeros(3), np.array([1.0, 2.0, 3.0]))) == 0.0


def test_robust_parallel_equal():
    v = np.array([1.0, -2.0])
    assert polaris_robust_scale(PredictionDelta(v, v.copy())) == 0.0


def test_robust_guard_must_be_positive():
    with pytest.raises(ConfigError):
        PolarisRobust(guard=0.0)


@pytest.mark.parametrize("seed", range(5))
def test_robust_matches_grid_argmin_64d(seed):
    rng = np.random.default_rng(seed)
    du, dc = rng.standard_normal(64), rng.standard_normal(64)
    diff = dc - du
    w_star = polaris_robust_scale(PredictionDelta(du, dc), 0.0)
    # |du + w (dc - du)|^2 expanded in w
    w_grid, step = grid_argmin_quadratic(diff @ diff, 2 * du @ diff, du @ du, -10, 10)
    assert abs(w_star - w_grid) <= step


def test_exact_orthogonal_gives_zero():
    assert polaris_exact_delta(ExactSolverState(np.array([1.0, 0.0]), np.array([0.0, 2.0]), 0.0)) == 0.0


def test_exact_opposite_gives_one():
    b = np.array([0.5, -1.5, 2.0])
    assert polaris_exact_delta(ExactSolverState(-b, b, 0.0)) == pytest.approx(1.0, rel=1e-15)


def test_exact_ill_posed():
    with pytest.raises(IllPosedStateError):
        polaris_exact_delta(ExactSolverState(np.ones(3), np.zeros(3), 0.0))


@pytest.mark.parametrize("seed", range(5))
def test_exact_matches_grid_argmin_32d(seed):
    rng = np.random.default_rng(100 + seed)
    a, b = rng.standard_normal(32), rng.standard_normal(32)
    dw = polaris_exact_delta(ExactSolverState(a, b, 0.0))
    grid_dw, step = grid_argmin_quadratic(b @ b, 2 * a @ b, a @ a, -100, 100, n=2_000_001)
    assert step == pytest.approx(1e-4)
    assert abs(dw - grid_dw) <= step


def test_tau_endpoints():
    d = PredictionDelta(np.array([1.0, 2.0]), np.array([-3.0, 0.5]))
    np.testing.assert_array_equal(tau_approx(0.0, d), d.d_uncond)
    np.testing.assert_array_equal(tau_approx(1.0, d), d.d_cond)


def test_tau_orthogonal_at_optimum(rng):
    for _ in range(20):
        d = PredictionDelta(rng.standard_normal(16), rng.standard_normal(16))
        w = polaris_robust_scale(d, 0.0)
        tau = tau_approx(w, d)
        diff = d.d_cond - d.d_uncond
        assert abs(tau @ diff) <= 1e-10 * np.linalg.norm(tau) * np.linalg.norm(diff)


def test_robust_policy_step_zero_returns_initial_scale():
    pol = PolarisRobust(omega0=3.25)
    pol.reset(5)
    assert next_scale(pol, 0) == 3.25


def test_robust_policy_requires_delta_after_start():
    pol = PolarisRobust()
    pol.reset(3)
    with pytest.raises(ConfigError):
        pol.next(1)


def test_exact_policy_requires_state():
    pol = PolarisExact()
    pol.reset(3)
    assert pol.next(0) == 1.0
    with pytest.raises(ConfigError):
        pol.next(1)


def test_exact_policy_clamps_and_flags():
    pol = PolarisExact(omega0=0.5)
    pol.reset(3)
    w = pol.next(1, state=ExactSolverState(np.array([1.0]), np.array([1e-200]), 0.5))
    assert pol.diverged and math.isfinite(w)
    assert abs(w - 0.5) == EXACT_DELTA_CLAMP
    pol.reset(3)
    assert not pol.diverged
    w = pol.next(1, state=ExactSolverState(np.array([1e3]), np.array([-1e-4]), 0.0))
    assert pol.diverged and w == EXACT_DELTA_CLAMP


def test_exact_policy_cumulative_sum(rng):
    pol = PolarisExact(omega0=1.7)
    pol.reset(10)
    w = pol.next(0)
    ws = [w]
    for k in range(1, 10):
        cur = pair(rng.standard_normal(8), rng.standard_normal(8), k)
        prev = pair(rng.standard_normal(8), rng.standard_normal(8), k - 1)
        w = pol.next(k, state=exact_state(w, cur, prev))
        ws.append(w)
    expected = 1.7
    for k, dw in enumerate(pol.deltas, start=1):
        expected = expected + dw
        assert ws[k] == expected
    assert ws[-1] == pytest.approx(1.7 + math.fsum(pol.deltas), rel=1e-12)


def test_random_uniform_mean_and_range():
    pol = RandomUniform(0.0, 2.0, seed=9)
    pol.reset(10_000)
    draws = np.array([pol.next(k) for k in range(10_000)])
    assert abs(draws.mean() - 1.0) <= 0.03
    assert np.all((draws > 0) & (draws < 2))


def test_random_uniform_reproducible():
    a, b = RandomUniform(seed=4), RandomUniform(seed=4)
    a.reset(5)
    b.reset(5)
    first = [a.next(k) for k in range(5)]
    assert first == [b.next(k) for k in range(5)]
    a.reset(5)
    assert first == [a.next(k) for k in range(5)]


def test_random_uniform_needs_ordered_interval():
    with pytest.raises(ConfigError):
        RandomUniform(2.0, 1.0)


def test_cosine_endpoints():
    pol = CosineDecay(1.0, 0.0)
    pol.reset(7)
    assert pol.next(0) == 1.0
    assert pol.next(6) == pytest.approx(0.0, abs=1e-15)
    vals = [pol.next(k) for k in range(7)]
    assert all(x >= y for x, y in zip(vals, vals[1:]))


def test_replay_orders_and_exhaustion():
    fwd = Replay((1.0, 2.0, 3.0))
    rev = Replay((1.0, 2.0, 3.0), order="reverse")
    assert [fwd.next(k) for k in range(3)] == [1.0, 2.0, 3.0]
    assert [rev.next(k) for k in range(3)] == [3.0, 2.0, 1.0]
    with pytest.raises(ScheduleLengthError):
        fwd.next(3)
    with pytest.raises(ConfigError):
        Replay((1.0,), order="sideways")


def test_schedule_reverse():
    s = ScaleSchedule([0.1, 0.2, 0.3])
    assert s.reversed().omegas == [0.3, 0.2, 0.1]
    assert len(s) == 3 and s[1] == 0.2


def test_fixed_policy():
    assert Fixed(7.5).next(3) == 7.5
    assert Fixed(7.5).describe() == "fixed(7.5)"


finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


@st.composite
def delta_pairs(draw):
    d = draw(st.integers(2, 32))
    du = draw(arrays(np.float64, d, elements=finite))
    dc = draw(arrays(np.float64, d, elements=finite))
    return du, dc


@settings(max_examples=200, deadline=None)
@given(delta_pairs(), st.floats(-50, 50))
def test_robust_scale_minimises_tau(deltas, w_other):
    du, dc = deltas
    diff = du - dc
    assume(diff @ diff > 1e-6 * max(1.0, du @ du + dc @ dc))
    d = PredictionDelta(du, dc)
    w = polaris_robust_scale(d, 0.0)
    best = np.linalg.norm(tau_approx(w, d))
    assert best <= np.linalg.norm(tau_approx(w_other, d)) * (1 + 1e-9) + 1e-12


@settings(max_examples=200, deadline=None)
@given(delta_pairs(), st.floats(-100, 100))
def test_exact_update_minimises_residual(vectors, dw_other):
    a, b = vectors
    assume(b @ b > 1e-6)
    dw = polaris_exact_delta(ExactSolverState(a, b, 0.0))
    r = np.linalg.norm(a + b * dw)
    assert r <= np.linalg.norm(a + b * dw_other) * (1 + 1e-9) + 1e-12


@settings(max_examples=100, deadline=None)
@given(delta_pairs())
def test_robust_scale_always_finite_with_guard(deltas):
    assert math.isfinite(polaris_robust_scale(PredictionDelta(*deltas), 1e-8))
