"""Linear inverse problems solved with simplified DDNM, DPS and DDRM samplers.

All operators are explicit dense matrices on small grids. Every method runs
the same guided DDIM sampling loop; they differ only in how the clean
estimate (or the state) is pulled towards the measurement:

* ``ddnm``: replace the range-space part of the clean estimate with ``A+ y``.
* ``ddrm``: relaxed range-space correction ``x0 += eta A+ (y - A x0)``.
* ``dps``:  subtract ``lambda`` times the gradient of ``0.5 |y - A x0(x_t)|^2``.

Guidance is applied first and the correction second.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .guidance import Fixed, PolarisRobust, PredictionDelta, ScalePolicy, cfg_combine
from .metrics import fidelity_row
from .oracle import UNCONDITIONAL, Condition
from .pipeline import ddim_invert_step, predict_pair
from .schedule import NoiseSchedule, TimestepMap

METHODS = ("ddnm", "dps", "ddrm")
TASKS = ("deblur", "downsample", "inpaint", "colorize")
DEFAULT_ETA = 0.1
DEFAULT_LAMBDA = 0.2


@dataclass(frozen=True)
class LinearMeasurement:
    operator: np.ndarray
    pinv: np.ndarray
    y: np.ndarray
    noise_sigma: float = 0.0

    @classmethod
    def build(cls, operator, x_true=None, y=None, noise_sigma: float = 0.0, rng=None, rcond: float = 1e-10):
        A = np.atleast_2d(np.asarray(operator, dtype=np.float64))
        m, n = A.shape
        if m > n:
            raise ConfigError(f"operator must have m <= n, got {A.shape}", key="operator")
        if y is None:
            if x_true is None:
                raise ConfigError("need either y or x_true to build a measurement")
            y = A @ np.asarray(x_true, dtype=np.float64)
            if noise_sigma > 0:
                rng = np.random.default_rng(0) if rng is None else rng
                y = y + noise_sigma * rng.standard_normal(m)
        y = np.asarray(y, dtype=np.float64)
        if y.shape != (m,):
            raise ConfigError(f"y has shape {y.shape}, operator expects ({m},)", key="y")
        return cls(A, np.linalg.pinv(A, rcond=rcond), y, float(noise_sigma))

    @property
    def n(self) -> int:
        return self.operator.shape[1]


@dataclass(frozen=True)
class RestoreConfig:
    method: str = "ddnm"
    eta: float = DEFAULT_ETA
    lam: float = DEFAULT_LAMBDA
    init: str = "gaussian"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}", key="method")
        if self.eta < 0 or self.lam < 0:
            raise ConfigError("eta and lambda must be >= 0", key="eta")
        if self.init not in ("gaussian", "inversion"):
            raise ConfigError(f"init must be gaussian or inversion, got {self.init!r}", key="init")


def ddnm_project(x0_hat, meas: LinearMeasurement) -> np.ndarray:
    x0_hat = np.asarray(x0_hat, dtype=np.float64)
    if x0_hat.shape != (meas.n,):
        raise ConfigError(f"estimate has shape {x0_hat.shape}, operator expects ({meas.n},)")
    return meas.pinv @ meas.y + x0_hat - meas.pinv @ (meas.operator @ x0_hat)


def ddrm_correct(x0_hat, meas: LinearMeasurement, eta: float) -> np.ndarray:
    return x0_hat + eta * (meas.pinv @ (meas.y - meas.operator @ x0_hat))


def dps_gradient(x, meas: LinearMeasurement, model, cond: Condition, alpha_bar: float, omega: float | None = None) -> np.ndarray:
    """Gradient in ``x`` of ``0.5 |y - A m(x)|^2`` with ``m`` the posterior mean.

    With ``omega`` set, ``m`` is the guided clean estimate
    ``(1 - omega) m_uncond + omega m_cond``.
    """
    A = meas.operator
    if omega is None:
        m = model.posterior_mean(x, cond, alpha_bar)
        resid = A.T @ (A @ m - meas.y)
        return model.posterior_mean_vjp(x, cond, alpha_bar, resid)
    mu = model.posterior_mean(x, UNCONDITIONAL, alpha_bar)
    mc = model.posterior_mean(x, cond, alpha_bar)
    resid = A.T @ (A @ ((1.0 - omega) * mu + omega * mc) - meas.y)
    return (1.0 - omega) * model.posterior_mean_vjp(x, UNCONDITIONAL, alpha_bar, resid) + omega * model.posterior_mean_vjp(
        x, cond, alpha_bar, resid
    )


def _correct(x0_hat, meas, config: RestoreConfig):
    if config.method == "ddnm":
        return ddnm_project(x0_hat, meas)
    if config.method == "ddrm":
        return ddrm_correct(x0_hat, meas, config.eta)
    return x0_hat


def _sampling_scales(policy: ScalePolicy, n: int):
    """Scales for a sampling loop that has no recorded inversion."""
    policy.reset(n)
    return policy


def restoration_loop(x_start, meas, config, oracle, cond, policy, schedule, tmap, omegas=None):
    """Guided DDIM denoising from the terminal state with a measurement correction per step.

    If ``omegas`` is given it is replayed in forward order; otherwise the
    policy is queried along the sampling path (robust POLARIS uses the change
    of predictions between consecutive sampling states).
    """
    from .oracle import unwrap

    model = unwrap(oracle)
    alphas = tmap.state_alpha_bars(schedule)
    n = tmap.t_infer
    if omegas is None:
        _sampling_scales(policy, n)
    x = np.array(x_start, dtype=np.float64)
    x0_hat = x
    prev = None
    used = []
    diverged = False
    for k, t in enumerate(range(n, 0, -1)):
        a_t, a_prev = alphas[t], alphas[t - 1]
        pair = predict_pair(oracle, x, cond, a_t, t)
        if omegas is not None:
            omega = float(omegas[t - 1])
        else:
            delta = PredictionDelta.between(pair, prev) if (prev is not None and policy.needs == "delta") else None
            omega = policy.next(k, delta=delta)
        prev = pair
        used.append(omega)
        eps = cfg_combine(pair, omega)
        sigma_t = np.sqrt(1.0 - a_t)
        x0_hat = _correct((x - sigma_t * eps) / np.sqrt(a_t), meas, config)
        x_next = np.sqrt(a_prev) * x0_hat + np.sqrt(1.0 - a_prev) * eps
        if config.method == "dps":
            x_next = x_next - config.lam * dps_gradient(x, meas, model, cond, a_t, omega=omega)
        if not np.all(np.isfinite(x_next)):
            diverged = True
            break
        x = x_next
    return x0_hat, used, diverged


def run_restoration(
    meas: LinearMeasurement,
    config: RestoreConfig,
    policy: ScalePolicy,
    oracle,
    schedule: NoiseSchedule,
    tmap: TimestepMap,
    seed: int,
    x_true=None,
    cond: Condition | None = None,
    task: str = "",
):
    """Restore a signal from ``meas``; returns ``(estimate, metrics_row)``.

    ``init="gaussian"`` starts from ``N(0, I)`` drawn from ``seed``.
    ``init="inversion"`` first inverts the back-projection ``A+ y`` with the
    policy, then replays the recorded scales during restoration.
    """
    cond = Condition.component(0) if cond is None else cond
    omegas = None
    if config.init == "gaussian":
        x_start = np.random.default_rng(seed).standard_normal(meas.n)
    else:
        from .pipeline import invert

        inv = invert(meas.pinv @ meas.y, oracle, cond, policy, schedule, tmap)
        x_start, omegas = inv.final, inv.omegas.omegas
    estimate, _, diverged = restoration_loop(x_start, meas, config, oracle, cond, policy, schedule, tmap, omegas)
    if diverged:
        estimate = np.full(meas.n, np.nan)
    row = {"task": task, "method": config.method, "policy": policy.describe(), "seed": int(seed)}
    if x_true is not None:
        row.update(fidelity_row(x_true, estimate, getattr(oracle, "shape", None)))
    row["diverged"] = int(diverged)
    return estimate, row


# -- desk-scale degradation operators ------------------------------------------


def blur_operator(h: int, w: int, sigma: float = 1.0) -> np.ndarray:
    """Gaussian blur with zero padding, rows normalised to sum to one."""
    yy, xx = np.mgrid[0:h, 0:w]
    pts = np.stack([yy.ravel(), xx.ravel()], axis=1).astype(np.float64)
    d2 = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1)
    A = np.exp(-d2 / (2.0 * sigma**2))
    A[d2 > (3.0 * sigma) ** 2] = 0.0
    return A / A.sum(axis=1, keepdims=True)


def downsample_operator(h: int, w: int, factor: int = 2) -> np.ndarray:
    if h % factor or w % factor:
        raise ConfigError(f"grid {h}x{w} not divisible by factor {factor}", key="factor")
    ho, wo = h // factor, w // factor
    A = np.zeros((ho * wo, h * w))
    for i in range(ho):
        for j in range(wo):
            for di in range(factor):
                for dj in range(factor):
                    A[i * wo + j, (i * factor + di) * w + j * factor + dj] = 1.0 / factor**2
    return A


def center_mask_operator(h: int, w: int, size: int | None = None) -> np.ndarray:
    """Row selector keeping every pixel outside a centred ``size x size`` hole."""
    size = h // 2 if size is None else size
    top, left = (h - size) // 2, (w - size) // 2
    keep = [
        i * w + j
        for i in range(h)
        for j in range(w)
        if not (top <= i < top + size and left <= j < left + size)
    ]
    return np.eye(h * w)[keep]


def grayscale_operator(c: int, h: int, w: int) -> np.ndarray:
    """Channel average: ``(c, h, w)`` colour grid to one ``(h, w)`` grey grid."""
    return np.hstack([np.eye(h * w) / c] * c)


def task_operator(task: str, shape) -> np.ndarray:
    if task == "colorize":
        if len(shape) != 3:
            raise ConfigError("colorize needs a (c, h, w) model shape", key="shape")
        return grayscale_operator(*shape)
    h, w = shape[-2:]
    if len(shape) == 3 and shape[0] != 1:
        raise ConfigError(f"task {task!r} needs a single-channel grid", key="shape")
    if task == "deblur":
        return blur_operator(h, w)
    if task == "downsample":
        return downsample_operator(h, w)
    if task == "inpaint":
        return center_mask_operator(h, w)
    raise ConfigError(f"unknown task {task!r}; expected one of {TASKS}", key="task")


def polaris_policy(omega0: float = 1.0) -> PolarisRobust:
    return PolarisRobust(omega0=omega0)


def baseline_policy(omega: float = 1.0) -> Fixed:
    return Fixed(omega)
