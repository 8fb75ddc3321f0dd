"""Noise, score and velocity parameterisations of the prediction field.

Each space is an affine image of the noise prediction, ``psi = a_t eps + b_t``:

* noise:    ``a_t = 1``,              ``b_t = 0``
* score:    ``a_t = -1 / sigma_t``,   ``b_t = 0``
* velocity: ``a_t = sqrt(alpha_bar)``, ``b_t = -sigma_t x_t``

with ``sigma_t = sqrt(1 - alpha_bar)``. Fixed-scale guidance commutes with any
such map; the POLARIS scale does not, because the norms change.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, DegenerateTimestepError
from .guidance import DEFAULT_GUARD, PredictionDelta, polaris_robust_scale

SPACES = ("noise", "score", "velocity")


def _coeffs(space: str, x, alpha_bar: float):
    a = float(alpha_bar)
    if space == "noise":
        return 1.0, 0.0
    if not 0.0 <= a < 1.0:
        raise DegenerateTimestepError(f"sigma_t vanishes at alpha_bar={a!r}")
    sigma = np.sqrt(1.0 - a)
    if space == "score":
        return -1.0 / sigma, 0.0
    if space == "velocity":
        if a == 0.0:
            raise DegenerateTimestepError("velocity map is singular at alpha_bar=0")
        return np.sqrt(a), -sigma * np.asarray(x, dtype=np.float64)
    raise ConfigError(f"unknown space {space!r}; expected one of {SPACES}", key="space")


def to_space(eps, x, space: str, alpha_bar: float) -> np.ndarray:
    scale, shift = _coeffs(space, x, alpha_bar)
    return scale * np.asarray(eps, dtype=np.float64) + shift


def from_space(psi, x, space: str, alpha_bar: float) -> np.ndarray:
    scale, shift = _coeffs(space, x, alpha_bar)
    return (np.asarray(psi, dtype=np.float64) - shift) / scale


def unified_polaris_scale(d_psi_uncond, d_psi_cond, guard: float = DEFAULT_GUARD) -> float:
    return polaris_robust_scale(PredictionDelta(np.asarray(d_psi_uncond), np.asarray(d_psi_cond)), guard)


def guided_in_space(eps_uncond, eps_cond, omega, x, space, alpha_bar) -> np.ndarray:
    """Apply CFG to the ``space`` images of both predictions and map back to noise."""
    pu = to_space(eps_uncond, x, space, alpha_bar)
    pc = to_space(eps_cond, x, space, alpha_bar)
    return from_space((1.0 - omega) * pu + omega * pc, x, space, alpha_bar)


def check_fixed_scale_invariance(oracle, x0, omega, schedule, tmap, cond=None) -> float:
    """Largest relative state gap between fixed-scale round trips run in each space."""
    from .guidance import Fixed
    from .oracle import Condition
    from .pipeline import roundtrip

    cond = Condition.component(0) if cond is None else cond
    runs = {}
    for space in SPACES:
        _, inv, smp = roundtrip(x0, oracle, cond, cond, Fixed(omega), schedule, tmap, space=space)
        if inv.diverged or smp.diverged:
            raise FloatingPointError(f"fixed-scale run diverged in {space} space")
        runs[space] = np.concatenate([inv.states, smp.states[1:]])
    return max_pairwise_deviation(runs)


def max_pairwise_deviation(runs: dict) -> float:
    names = list(runs)
    worst = 0.0
    for i, p in enumerate(names):
        for q in names[i + 1 :]:
            a, b = runs[p], runs[q]
            scale = np.maximum(np.linalg.norm(a, axis=1), np.linalg.norm(b, axis=1))
            scale = np.where(scale > 0, scale, 1.0)
            worst = max(worst, float(np.max(np.linalg.norm(a - b, axis=1) / scale)))
    return worst
