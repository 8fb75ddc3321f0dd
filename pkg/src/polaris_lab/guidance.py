"""Classifier-free guidance and guidance-scale policies.

The robust POLARIS rule picks, at every inversion step, the scale that makes
the guided prediction change least between consecutive states::

    w = (|du|^2 - du.dc) / (|du - dc|^2 + guard)

where ``du`` / ``dc`` are the step-to-step changes of the unconditional and
conditional predictions. The exact rule instead updates the previous scale by
``dw = -(a.b) / |b|^2`` and is ill-conditioned when ``|b|`` is small.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, IllPosedStateError, ScheduleLengthError
from .oracle import PredictionPair

DEFAULT_GUARD = 1e-8
DEFAULT_OMEGA0 = 1.0
EXACT_DELTA_CLAMP = 1e6
_TINY = np.finfo(np.float64).tiny


@dataclass(frozen=True)
class PredictionDelta:
    d_uncond: np.ndarray
    d_cond: np.ndarray

    @classmethod
    def between(cls, current: PredictionPair, previous: PredictionPair) -> "PredictionDelta":
        return cls(current.eps_uncond - previous.eps_uncond, current.eps_cond - previous.eps_cond)


@dataclass(frozen=True)
class ExactSolverState:
    a: np.ndarray
    b: np.ndarray
    omega_prev: float


def cfg_combine(pair: PredictionPair, omega: float) -> np.ndarray:
    return (1.0 - omega) * pair.eps_uncond + omega * pair.eps_cond


def cfg_vectors(uncond: np.ndarray, cond: np.ndarray, omega: float) -> np.ndarray:
    return (1.0 - omega) * uncond + omega * cond


def polaris_robust_scale(delta: PredictionDelta, guard: float = DEFAULT_GUARD) -> float:
    """Closed-form minimiser of ``|(1 - w) du + w dc|^2`` with a guarded denominator.

    ``guard = 0`` is allowed for analysis but then parallel-equal deltas give
    a 0/0; callers in the pipeline always pass a positive guard.
    """
    du = np.asarray(delta.d_uncond, dtype=np.float64).ravel()
    dc = np.asarray(delta.d_cond, dtype=np.float64).ravel()
    diff = du - dc
    num = float(du @ du - du @ dc)
    den = float(diff @ diff) + guard
    if den == 0.0:
        return 0.0
    return num / den


def polaris_exact_delta(state: ExactSolverState) -> float:
    """``dw = -(a.b)/|b|^2``, the exact minimiser of ``|a + b dw|^2``."""
    a = np.asarray(state.a, dtype=np.float64).ravel()
    b = np.asarray(state.b, dtype=np.float64).ravel()
    bb = float(b @ b)
    if not bb > _TINY * max(1, b.size):
        raise IllPosedStateError(f"|b|^2 = {bb!r} is too small for the exact update")
    return -float(a @ b) / bb


def tau_approx(omega: float, delta: PredictionDelta) -> np.ndarray:
    return (1.0 - omega) * delta.d_uncond + omega * delta.d_cond


def exact_state(omega_prev: float, current: PredictionPair, previous: PredictionPair) -> ExactSolverState:
    """Terms of ``tau_inv = a + b dw`` with ``a`` evaluated at the known scale."""
    delta = PredictionDelta.between(current, previous)
    a = tau_approx(omega_prev, delta)
    b = previous.eps_cond - previous.eps_uncond
    return ExactSolverState(a=a, b=b, omega_prev=float(omega_prev))


# -- policies ---------------------------------------------------------------


class ScalePolicy:
    """Produces one guidance scale per inversion (or sampling) step.

    ``needs`` tells the pipeline what to compute for steps >= 1: ``"delta"``
    for a :class:`PredictionDelta`, ``"state"`` for an
    :class:`ExactSolverState`, or ``None``.
    """

    name = "policy"
    needs: str | None = None

    def reset(self, n_steps: int) -> None:
        self.n_steps = int(n_steps)

    def next(self, step: int, delta=None, state=None) -> float:
        raise NotImplementedError

    def describe(self) -> str:
        return self.name


@dataclass
class Fixed(ScalePolicy):
    omega: float = 1.0
    name = "fixed"

    def next(self, step, delta=None, state=None):
        return float(self.omega)

    def describe(self):
        return f"fixed({self.omega:g})"


@dataclass
class PolarisRobust(ScalePolicy):
    omega0: float = DEFAULT_OMEGA0
    guard: float = DEFAULT_GUARD
    name = "polaris"
    needs = "delta"

    def __post_init__(self):
        if not self.guard > 0:
            raise ConfigError(f"guard must be > 0, got {self.guard}", key="guard")

    def next(self, step, delta=None, state=None):
        if step == 0:
            return float(self.omega0)
        if delta is None:
            raise ConfigError("robust policy needs a prediction delta for steps >= 1")
        return polaris_robust_scale(delta, self.guard)


@dataclass
class PolarisExact(ScalePolicy):
    """Recursive exact rule ``w_t = w_{t-1} + dw_t``.

    ``dw`` is clamped to ``+-EXACT_DELTA_CLAMP``; a clamp or an ill-posed
    ``b`` sets :attr:`diverged` instead of producing NaN.
    """

    omega0: float = DEFAULT_OMEGA0
    name = "polaris_exact"
    needs = "state"
    diverged: bool = field(default=False, init=False)
    deltas: list = field(default_factory=list, init=False, repr=False)

    def reset(self, n_steps):
        super().reset(n_steps)
        self.diverged = False
        self.deltas = []

    def next(self, step, delta=None, state=None):
        if step == 0:
            return float(self.omega0)
        if state is None:
            raise ConfigError("exact policy needs an ExactSolverState for steps >= 1")
        try:
            dw = polaris_exact_delta(state)
        except IllPosedStateError:
            dw = EXACT_DELTA_CLAMP
            self.diverged = True
        if not math.isfinite(dw) or abs(dw) > EXACT_DELTA_CLAMP:
            dw = math.copysign(EXACT_DELTA_CLAMP, dw) if not math.isnan(dw) else EXACT_DELTA_CLAMP
            self.diverged = True
        self.deltas.append(dw)
        return state.omega_prev + dw


@dataclass
class Replay(ScalePolicy):
    """Replays a recorded schedule, forwards or reversed."""

    omegas: tuple = ()
    order: str = "forward"
    name = "replay"

    def __post_init__(self):
        if self.order not in ("forward", "reverse"):
            raise ConfigError(f"replay order must be forward or reverse, got {self.order!r}", key="order")
        self.omegas = tuple(float(w) for w in self.omegas)

    def next(self, step, delta=None, state=None):
        if step >= len(self.omegas) or step < 0:
            raise ScheduleLengthError(f"replay list has {len(self.omegas)} entries, step {step} requested")
        if self.order == "forward":
            return self.omegas[step]
        return self.omegas[len(self.omegas) - 1 - step]

    def describe(self):
        return f"replay_{self.order}"


@dataclass
class RandomUniform(ScalePolicy):
    lo: float = 0.0
    hi: float = 2.0
    seed: int = 0
    name = "random"

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ConfigError(f"need lo < hi, got ({self.lo}, {self.hi})", key="lo")
        self._rng = np.random.default_rng(self.seed)

    def reset(self, n_steps):
        super().reset(n_steps)
        self._rng = np.random.default_rng(self.seed)

    def next(self, step, delta=None, state=None):
        return float(self._rng.uniform(self.lo, self.hi))


@dataclass
class CosineDecay(ScalePolicy):
    start: float = 1.0
    end: float = 0.0
    name = "cosine"

    def next(self, step, delta=None, state=None):
        n = getattr(self, "n_steps", 1)
        if n <= 1:
            return float(self.start)
        frac = min(max(step / (n - 1), 0.0), 1.0)
        return float(self.end + (self.start - self.end) * 0.5 * (1.0 + math.cos(math.pi * frac)))


def next_scale(policy: ScalePolicy, step: int, delta=None, state=None) -> float:
    return policy.next(step, delta=delta, state=state)


@dataclass
class ScaleSchedule:
    omegas: list = field(default_factory=list)

    def __len__(self):
        return len(self.omegas)

    def __getitem__(self, i):
        return self.omegas[i]

    def reversed(self) -> "ScaleSchedule":
        return ScaleSchedule(list(reversed(self.omegas)))
