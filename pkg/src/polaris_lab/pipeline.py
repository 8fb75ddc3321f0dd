"""DDIM inversion with per-step guidance scales, and replayed sampling."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateTimestepError, ScheduleLengthError
from .guidance import PredictionDelta, ScalePolicy, ScaleSchedule, exact_state, tau_approx
from .oracle import UNCONDITIONAL, Condition, PredictionPair
from .param import guided_in_space, to_space
from .schedule import NoiseSchedule, TimestepMap


@dataclass
class LatentState:
    x: np.ndarray
    t_index: int


@dataclass
class Trajectory:
    """States visited by one inversion or sampling pass.

    ``states[k]`` is the state at trajectory position ``k`` in the order the
    pass visited them; ``omegas[k]`` is the scale used to leave ``states[k]``.
    """

    states: np.ndarray
    t_train_index: np.ndarray
    omegas: ScaleSchedule
    preds: list = field(default_factory=list)
    diverged: bool = False
    direction: str = "invert"

    @property
    def steps(self) -> int:
        return len(self.omegas)

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    def latent(self, k: int) -> LatentState:
        return LatentState(self.states[k], int(k))

    def tau_norms(self) -> np.ndarray:
        """``|tau_approx|`` at every step; NaN where no previous prediction exists."""
        out = np.full(self.steps, np.nan)
        for k in range(1, min(self.steps, len(self.preds))):
            delta = PredictionDelta.between(self.preds[k], self.preds[k - 1])
            out[k] = np.linalg.norm(tau_approx(self.omegas[k], delta))
        return out


def _sqrt_alpha(alpha_bar: float) -> float:
    if not alpha_bar > 0.0:
        raise DegenerateTimestepError(f"alpha_bar must be > 0, got {alpha_bar!r}")
    if alpha_bar > 1.0:
        raise DegenerateTimestepError(f"alpha_bar must be <= 1, got {alpha_bar!r}")
    return float(np.sqrt(alpha_bar))


def ddim_denoise_step(x, eps, alpha_bar_t: float, alpha_bar_prev: float) -> np.ndarray:
    """One deterministic DDIM step from level ``alpha_bar_t`` to the cleaner ``alpha_bar_prev``."""
    sa_t = _sqrt_alpha(alpha_bar_t)
    sa_p = _sqrt_alpha(alpha_bar_prev)
    x0_hat = (x - np.sqrt(1.0 - alpha_bar_t) * eps) / sa_t
    return np.sqrt(1.0 - alpha_bar_prev) * eps + sa_p * x0_hat


def ddim_invert_step(x, eps, alpha_bar_prev: float, alpha_bar_t: float) -> np.ndarray:
    """The algebraic inverse of :func:`ddim_denoise_step` for a fixed ``eps``."""
    sa_p = _sqrt_alpha(alpha_bar_prev)
    sa_t = _sqrt_alpha(alpha_bar_t)
    coef = np.sqrt(1.0 - alpha_bar_t) - sa_t * np.sqrt(1.0 - alpha_bar_prev) / sa_p
    return (sa_t / sa_p) * x + coef * eps


def predict_pair(oracle, x, cond: Condition, alpha_bar: float, t: int = 0, uncond=UNCONDITIONAL) -> PredictionPair:
    return PredictionPair(
        oracle.predict_noise(x, uncond, alpha_bar),
        oracle.predict_noise(x, cond, alpha_bar),
        t,
    )


def _in_space(pair: PredictionPair, x, space: str, alpha_bar: float) -> PredictionPair:
    if space == "noise":
        return pair
    return PredictionPair(
        to_space(pair.eps_uncond, x, space, alpha_bar),
        to_space(pair.eps_cond, x, space, alpha_bar),
        pair.t,
    )


def invert(
    x0,
    oracle,
    cond_source: Condition,
    policy: ScalePolicy,
    schedule: NoiseSchedule,
    tmap: TimestepMap,
    space: str = "noise",
) -> Trajectory:
    """Map a clean state to the terminal latent, choosing and recording one scale per step."""
    alphas = tmap.state_alpha_bars(schedule)
    idx = tmap.state_indices()
    n = tmap.t_infer
    policy.reset(n)
    x = np.array(x0, dtype=np.float64)
    states = [x]
    omegas: list[float] = []
    preds: list[PredictionPair] = []
    # overflow turns into inf/NaN, which the loop reports as divergence
    with np.errstate(over="ignore", invalid="ignore"):
        diverged = _invert_loop(x, oracle, cond_source, policy, alphas, n, space, states, omegas, preds)
    diverged = diverged or bool(getattr(policy, "diverged", False))
    return Trajectory(
        states=np.asarray(states),
        t_train_index=idx[: len(states)],
        omegas=ScaleSchedule(omegas),
        preds=preds,
        diverged=diverged,
        direction="invert",
    )


def _invert_loop(x, oracle, cond_source, policy, alphas, n, space, states, omegas, preds) -> bool:
    """Fills ``states``/``omegas``/``preds`` in place; returns True on a non-finite step."""
    prev_psi = None
    for t in range(n):
        a_t = alphas[t]
        pair = predict_pair(oracle, x, cond_source, a_t, t)
        psi = _in_space(pair, x, space, a_t)
        delta = state = None
        if t > 0:
            if policy.needs == "delta":
                delta = PredictionDelta.between(psi, prev_psi)
            elif policy.needs == "state":
                state = exact_state(omegas[-1], psi, prev_psi)
        omega = policy.next(t, delta=delta, state=state)
        eps = guided_in_space(pair.eps_uncond, pair.eps_cond, omega, x, space, a_t)
        x_next = ddim_invert_step(x, eps, a_t, alphas[t + 1])
        omegas.append(omega)
        preds.append(pair)
        prev_psi = psi
        if not (np.isfinite(omega) and np.all(np.isfinite(x_next))):
            return True
        x = x_next
        states.append(x)
    return False


def replay_index(t: int, n: int, order: str = "forward") -> int:
    """Entry of the recorded list used when denoising from state ``t`` (1-based) of ``n``.

    ``forward`` reuses the scale recorded for the same pair of timesteps
    during inversion; ``reverse`` walks the list in recording order while time
    runs backwards.
    """
    if order == "forward":
        return t - 1
    if order == "reverse":
        return n - t
    raise ValueError(f"unknown replay order {order!r}")


def sample(
    xT,
    oracle,
    cond_target: Condition,
    omegas,
    schedule: NoiseSchedule,
    tmap: TimestepMap,
    space: str = "noise",
    order: str = "forward",
) -> Trajectory:
    """Denoise from the terminal latent, replaying a recorded scale list."""
    alphas = tmap.state_alpha_bars(schedule)
    idx = tmap.state_indices()
    n = tmap.t_infer
    omegas = list(omegas.omegas if isinstance(omegas, ScaleSchedule) else omegas)
    if len(omegas) != n:
        raise ScheduleLengthError(f"need {n} scales to sample, got {len(omegas)}")
    x = np.array(xT, dtype=np.float64)
    states = [x]
    used: list[float] = []
    preds: list[PredictionPair] = []
    diverged = False
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(n, 0, -1):
            omega = float(omegas[replay_index(t, n, order)])
            a_t = alphas[t]
            pair = predict_pair(oracle, x, cond_target, a_t, t)
            eps = guided_in_space(pair.eps_uncond, pair.eps_cond, omega, x, space, a_t)
            x_prev = ddim_denoise_step(x, eps, a_t, alphas[t - 1])
            used.append(omega)
            preds.append(pair)
            if not np.all(np.isfinite(x_prev)):
                diverged = True
                break
            x = x_prev
            states.append(x)
    return Trajectory(
        states=np.asarray(states),
        t_train_index=idx[::-1][: len(states)],
        omegas=ScaleSchedule(used),
        preds=preds,
        diverged=diverged,
        direction="sample",
    )


def roundtrip(
    x0,
    oracle,
    cond_source: Condition,
    cond_target: Condition,
    policy: ScalePolicy,
    schedule: NoiseSchedule,
    tmap: TimestepMap,
    space: str = "noise",
    order: str = "forward",
):
    """Invert then sample; returns ``(x0_reconstructed, inversion, sampling)``.

    A diverged inversion is returned with an empty sampling trajectory and a
    NaN reconstruction.
    """
    inv = invert(x0, oracle, cond_source, policy, schedule, tmap, space=space)
    if inv.diverged and inv.steps and len(inv.states) <= inv.steps:
        empty = Trajectory(np.empty((0, len(x0))), np.empty(0, dtype=int), ScaleSchedule([]), diverged=True, direction="sample")
        return np.full(len(x0), np.nan), inv, empty
    smp = sample(inv.final, oracle, cond_target, inv.omegas, schedule, tmap, space=space, order=order)
    if smp.diverged:
        return np.full(len(x0), np.nan), inv, smp
    return smp.final, inv, smp
