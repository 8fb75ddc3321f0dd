"""Perturbation studies of the exact and robust scale rules, plus the history-term trace.

The exact update ``dw = -(a.b)/|b|^2`` is evaluated along a path ``b* = t u``
that shrinks the guidance direction while the prediction noise ``delta`` is
held fixed. Its error grows like ``1/t``. The robust ratio is evaluated for
shrinking noise on well-separated deltas, where its error scales linearly
with the noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, PreconditionError
from .guidance import ExactSolverState, PredictionDelta, polaris_exact_delta, polaris_robust_scale, tau_approx

RATIO_CAP = 1e12


@dataclass(frozen=True)
class PerturbationCase:
    """True terms ``a*``, unit direction ``u`` and a frozen noise realisation."""

    a_true: np.ndarray
    u: np.ndarray
    delta_a: np.ndarray
    delta_b: np.ndarray

    def __post_init__(self):
        if abs(np.linalg.norm(self.u) - 1.0) > 1e-12:
            raise ConfigError("u must have unit norm", key="u")

    @classmethod
    def draw(cls, dim: int = 16, noise: float = 0.1, seed: int = 0, orthogonal: bool = False, delta_b: bool = True):
        rng = np.random.default_rng(seed)
        u = rng.standard_normal(dim)
        u /= np.linalg.norm(u)
        a = rng.standard_normal(dim)
        if orthogonal:
            a -= (a @ u) * u
        da = noise * rng.standard_normal(dim)
        db = noise * rng.standard_normal(dim) if delta_b else np.zeros(dim)
        return cls(a, u, da, db)

    def b_true(self, t: float) -> np.ndarray:
        return t * self.u


def exact_error(case: PerturbationCase, t: float) -> float:
    """``dw_observed - dw_true`` at path parameter ``t``."""
    b_star = case.b_true(t)
    true = polaris_exact_delta(ExactSolverState(case.a_true, b_star, 0.0))
    obs = polaris_exact_delta(ExactSolverState(case.a_true + case.delta_a, b_star + case.delta_b, 0.0))
    return obs - true


def exact_error_curve(case: PerturbationCase, t_values) -> list[tuple[float, float]]:
    t_values = [float(t) for t in t_values]
    if any(not t > 0 for t in t_values):
        raise ConfigError("every t must be > 0", key="t_values")
    return [(t, abs(exact_error(case, t))) for t in t_values]


@dataclass(frozen=True)
class RobustCase:
    """True prediction deltas and a frozen unit-variance noise pattern."""

    d_uncond: np.ndarray
    d_cond: np.ndarray
    noise_uncond: np.ndarray
    noise_cond: np.ndarray

    @classmethod
    def draw(cls, dim: int = 16, seed: int = 0, separation: float = 1.0):
        rng = np.random.default_rng(seed)
        du = rng.standard_normal(dim)
        dc = rng.standard_normal(dim)
        gap = np.linalg.norm(du - dc)
        dc = du + (dc - du) * (separation / gap)
        return cls(du, dc, rng.standard_normal(dim), rng.standard_normal(dim))

    @property
    def separation(self) -> float:
        return float(np.linalg.norm(self.d_uncond - self.d_cond))


def robust_error(case: RobustCase, noise: float, guard: float = 0.0) -> tuple[float, float]:
    """Returns ``(|noise perturbation|, w_observed - w_true)``."""
    pu, pc = noise * case.noise_uncond, noise * case.noise_cond
    true = polaris_robust_scale(PredictionDelta(case.d_uncond, case.d_cond), guard)
    obs = polaris_robust_scale(PredictionDelta(case.d_uncond + pu, case.d_cond + pc), guard)
    return float(np.linalg.norm(pu - pc)), obs - true


def robust_error_curve(case: RobustCase, noise_scales, eta: float, guard: float = 0.0) -> list[tuple[float, float, float]]:
    """Rows ``(noise_scale, |delta noise|, |E|)``.

    Requires the true deltas to be ``eta``-separated and every noise scale to
    stay below ``eta / 2``.
    """
    if not eta > 0:
        raise ConfigError("eta must be > 0", key="eta")
    if case.separation < eta * (1.0 - 1e-12):
        raise PreconditionError(f"|du - dc| = {case.separation:.3g} is below eta = {eta:.3g}")
    rows = []
    for s in noise_scales:
        s = float(s)
        if s < 0 or s > eta / 2:
            raise PreconditionError(f"noise scale {s:.3g} outside [0, eta/2] with eta = {eta:.3g}")
        norm, err = robust_error(case, s, guard)
        rows.append((s, norm, abs(err)))
    return rows


def fit_slope(x, y, trim: float = 0.1) -> float:
    """OLS slope of ``log10 y`` against ``log10 x`` after trimming ``trim`` of points at each end."""
    x = np.log10(np.asarray(x, dtype=np.float64))
    y = np.log10(np.asarray(y, dtype=np.float64))
    order = np.argsort(x)
    x, y = x[order], y[order]
    k = int(np.floor(trim * len(x)))
    if k:
        x, y = x[k:-k], y[k:-k]
    if len(x) < 2:
        raise ConfigError("need at least two points after trimming")
    slope, _ = np.polyfit(x, y, 1)
    return float(slope)


def contrast(exact_case: PerturbationCase, robust_case: RobustCase, t_values, noise: float) -> dict:
    """Worst errors of both rules at the same input noise level."""
    exact = max(e for _, e in exact_error_curve(exact_case, t_values))
    robust = abs(robust_error(robust_case, noise)[1])
    return {"noise": noise, "exact_max": exact, "robust": robust, "ratio": exact / robust if robust > 0 else np.inf}


def magnitude_ratio_trace(trajectory) -> list[tuple[int, float, float, float]]:
    """Per-step ``(step, |a|, |dw| |b|, (|a| / (|dw| |b|))^2)`` for a recorded inversion.

    ``a`` is the current-step error at the chosen scale, ``b`` the guidance
    direction at the previous state and ``dw`` the change of scale. A zero
    history term records the ratio as ``RATIO_CAP``.
    """
    preds, omegas = trajectory.preds, trajectory.omegas
    rows = []
    for k in range(1, min(len(preds), len(omegas))):
        delta = PredictionDelta.between(preds[k], preds[k - 1])
        a = float(np.linalg.norm(tau_approx(omegas[k], delta)))
        b = float(np.linalg.norm(preds[k - 1].eps_cond - preds[k - 1].eps_uncond))
        hist = abs(omegas[k] - omegas[k - 1]) * b
        ratio2 = RATIO_CAP if hist == 0.0 else min((a / hist) ** 2, RATIO_CAP)
        rows.append((k, a, hist, ratio2))
    return rows


def exact_rule_sweep(dim: int = 16, noise: float = 0.1, seed: int = 0, n_points: int = 41, lo: float = 1e-6, hi: float = 1e-2):
    case = PerturbationCase.draw(dim, noise, seed)
    ts = np.logspace(np.log10(lo), np.log10(hi), n_points)
    curve = exact_error_curve(case, ts)
    return curve, fit_slope(*zip(*curve))


def robust_rule_sweep(dim: int = 16, eta: float = 1.0, seed: int = 0, n_points: int = 41, lo: float = 1e-8, hi: float = 1e-3):
    case = RobustCase.draw(dim, seed, separation=2.0 * eta)
    ss = np.logspace(np.log10(lo), np.log10(hi), n_points)
    curve = robust_error_curve(case, ss, eta)
    return curve, fit_slope([r[0] for r in curve], [r[2] for r in curve])
