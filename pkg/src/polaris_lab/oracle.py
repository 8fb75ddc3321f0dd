"""Closed-form noise predictors for Gaussian-mixture data.

For data ``x0 ~ sum_k w_k N(mu_k, Sigma_k)`` the noisy marginal at level
``alpha_bar`` is ``sum_k w_k N(sqrt(alpha_bar) mu_k, alpha_bar Sigma_k + (1 - alpha_bar) I)``
and the optimal noise prediction is
``(x - sqrt(alpha_bar) E[x0 | x]) / sqrt(1 - alpha_bar)``.

A :class:`Condition` restricts the mixture to a subset of components, which
plays the role of the text prompt in classifier-free guidance.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np
from scipy.special import logsumexp

from .errors import ConfigError, DegenerateTimestepError

_LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class Condition:
    """Which mixture components a prediction is conditioned on.

    ``indices is None`` means unconditional (the full mixture).
    """

    indices: tuple[int, ...] | None = None

    @classmethod
    def unconditional(cls) -> "Condition":
        return cls(None)

    @classmethod
    def component(cls, index: int) -> "Condition":
        return cls((int(index),))

    @classmethod
    def subset(cls, indices: Sequence[int]) -> "Condition":
        idx = tuple(sorted({int(i) for i in indices}))
        if not idx:
            raise ConfigError("subset condition needs at least one component")
        return cls(idx)

    @property
    def kind(self) -> str:
        if self.indices is None:
            return "unconditional"
        return "component" if len(self.indices) == 1 else "subset"


UNCONDITIONAL = Condition.unconditional()


@dataclass(frozen=True)
class PredictionPair:
    eps_uncond: np.ndarray
    eps_cond: np.ndarray
    t: int = 0


class NoiseOracle(Protocol):
    dim: int

    def predict_noise(self, x: np.ndarray, cond: Condition, alpha_bar: float) -> np.ndarray: ...

    def posterior_mean(self, x: np.ndarray, cond: Condition, alpha_bar: float) -> np.ndarray: ...


def _check_alpha(alpha_bar: float) -> float:
    a = float(alpha_bar)
    if not 0.0 < a < 1.0:
        raise DegenerateTimestepError(f"alpha_bar must lie in (0, 1), got {a!r}")
    return a


@dataclass(eq=False)
class AnalyticModel:
    """Gaussian mixture with exact posterior-mean noise predictions.

    Covariances are eigendecomposed once; every query is then a couple of
    matrix-vector products per component.
    """

    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    shape: tuple[int, ...] | None = None
    _evals: np.ndarray = field(init=False, repr=False)
    _evecs: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64).ravel()
        mu = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        cov = np.asarray(self.covs, dtype=np.float64)
        if cov.ndim == 2:
            cov = cov[None]
        k, d = mu.shape
        if len(w) != k or cov.shape != (k, d, d):
            raise ConfigError(
                f"inconsistent component shapes: weights {w.shape}, means {mu.shape}, covs {cov.shape}",
                key="model",
            )
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ConfigError(f"weights must be positive and sum to 1, got {w.tolist()}", key="model")
        if not np.allclose(cov, np.swapaxes(cov, 1, 2), rtol=0, atol=1e-12):
            raise ConfigError("covariances must be symmetric", key="model")
        for c in cov:
            try:
                np.linalg.cholesky(c)
            except np.linalg.LinAlgError as exc:
                raise ConfigError("covariance is not positive definite", key="model") from exc
        if self.shape is not None and int(np.prod(self.shape)) != d:
            raise ConfigError(f"shape {self.shape} does not match dim {d}", key="model")
        evals, evecs = np.linalg.eigh(cov)
        for arr in (w, mu, cov, evals, evecs):
            arr.setflags(write=False)
        self.weights, self.means, self.covs = w, mu, cov
        self._evals = evals
        self._evecs = evecs

    @classmethod
    def from_cholesky(cls, weights, means, chol_factors, shape=None) -> "AnalyticModel":
        L = np.asarray(chol_factors, dtype=np.float64)
        return cls(weights, means, L @ np.swapaxes(L, -1, -2), shape=shape)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    def _select(self, cond: Condition) -> np.ndarray:
        if cond.indices is None:
            return np.arange(self.n_components)
        idx = np.asarray(cond.indices, dtype=int)
        if idx.min() < 0 or idx.max() >= self.n_components:
            raise ConfigError(f"condition {cond.indices} invalid for {self.n_components} components")
        return idx

    def _component_terms(self, x, cond, alpha_bar):
        """Per-component log-likelihoods, posterior means and whitened pieces."""
        a = _check_alpha(alpha_bar)
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.dim,):
            raise ConfigError(f"state has shape {x.shape}, model dim is {self.dim}")
        idx = self._select(cond)
        sa = np.sqrt(a)
        lam = self._evals[idx]                      # (k, d)
        Q = self._evecs[idx]                        # (k, d, d)
        s = a * lam + (1.0 - a)                     # eigenvalues of the noisy covariance
        r = x[None, :] - sa * self.means[idx]       # (k, d)
        z = np.einsum("kji,kj->ki", Q, r)           # Q^T r
        logw = np.log(self.weights[idx])
        loglik = logw - 0.5 * (np.sum(z * z / s, axis=1) + np.sum(np.log(s), axis=1) + self.dim * _LOG_2PI)
        post = self.means[idx] + sa * np.einsum("kij,kj->ki", Q, lam / s * z)
        return idx, loglik, post, Q, lam, s, z

    def responsibilities(self, x, cond, alpha_bar) -> np.ndarray:
        _, loglik, *_ = self._component_terms(x, cond, alpha_bar)
        return np.exp(loglik - logsumexp(loglik))

    def posterior_mean(self, x, cond: Condition, alpha_bar: float) -> np.ndarray:
        _, loglik, post, *_ = self._component_terms(x, cond, alpha_bar)
        resp = np.exp(loglik - logsumexp(loglik))
        return resp @ post

    def predict_noise(self, x, cond: Condition, alpha_bar: float) -> np.ndarray:
        m = self.posterior_mean(x, cond, alpha_bar)
        a = float(alpha_bar)
        return (np.asarray(x, dtype=np.float64) - np.sqrt(a) * m) / np.sqrt(1.0 - a)

    def posterior_mean_vjp(self, x, cond: Condition, alpha_bar: float, v) -> np.ndarray:
        """``J^T v`` where ``J`` is the Jacobian of ``posterior_mean`` in ``x``.

        Uses the exact derivative, responsibilities included.
        """
        idx, loglik, post, Q, lam, s, z = self._component_terms(x, cond, alpha_bar)
        sa = np.sqrt(float(alpha_bar))
        v = np.asarray(v, dtype=np.float64)
        resp = np.exp(loglik - logsumexp(loglik))
        mbar = resp @ post
        # score of each noisy component: -S_k^{-1} r_k
        grads = -np.einsum("kij,kj->ki", Q, z / s)
        gbar = resp @ grads
        # within-component Jacobians are symmetric: sqrt(a) Q diag(lam/s) Q^T
        qv = np.einsum("kji,j->ki", Q, v)
        jv = sa * np.einsum("kij,kj->ki", Q, lam / s * qv)
        out = resp @ jv
        out += (resp * ((post - mbar) @ v)) @ (grads - gbar)
        return out

    def sample(self, rng: np.random.Generator, cond: Condition = UNCONDITIONAL) -> np.ndarray:
        idx = self._select(cond)
        w = self.weights[idx] / self.weights[idx].sum()
        k = idx[rng.choice(len(idx), p=w)]
        half = self._evecs[k] * np.sqrt(self._evals[k])
        return self.means[k] + half @ rng.standard_normal(self.dim)


class PerturbedOracle:
    """Adds i.i.d. N(0, noise_scale^2) to every prediction of a wrapped oracle.

    The draw for call number ``n`` comes from a generator seeded with
    ``(seed, n)``, so a run is reproducible and draws are independent across
    calls. The call counter makes an instance single-trajectory state:
    do not share one between concurrent runs.
    """

    def __init__(self, base: NoiseOracle, noise_scale: float, seed: int):
        if noise_scale < 0:
            raise ConfigError(f"noise_scale must be >= 0, got {noise_scale}", key="prediction_noise")
        self.base = base
        self.noise_scale = float(noise_scale)
        self.seed = int(seed)
        self.calls = 0

    @property
    def dim(self) -> int:
        return self.base.dim

    @property
    def shape(self):
        return getattr(self.base, "shape", None)

    def delta(self, call_index: int) -> np.ndarray:
        rng = np.random.default_rng([self.seed, int(call_index)])
        return self.noise_scale * rng.standard_normal(self.dim)

    def predict_noise(self, x, cond: Condition, alpha_bar: float) -> np.ndarray:
        eps = self.base.predict_noise(x, cond, alpha_bar)
        n = self.calls
        self.calls += 1
        if self.noise_scale == 0.0:
            return eps
        return eps + self.delta(n)

    def posterior_mean(self, x, cond: Condition, alpha_bar: float) -> np.ndarray:
        return self.base.posterior_mean(x, cond, alpha_bar)

    def posterior_mean_vjp(self, x, cond, alpha_bar, v):
        return self.base.posterior_mean_vjp(x, cond, alpha_bar, v)


def perturbed(oracle: NoiseOracle, noise_scale: float, seed: int) -> PerturbedOracle:
    return PerturbedOracle(oracle, noise_scale, seed)


def unwrap(oracle) -> AnalyticModel:
    while isinstance(oracle, PerturbedOracle):
        oracle = oracle.base
    return oracle


def _grid_kernel(h: int, w: int, length: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    pts = np.stack([yy.ravel(), xx.ravel()], axis=1).astype(np.float64)
    d2 = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1)
    return np.exp(-d2 / (2.0 * length**2))


def grid_mixture(
    seed: int,
    shape: tuple[int, ...] = (8, 8),
    scales: Sequence[float] = (0.05, 0.5),
    lengths: Sequence[float] = (2.0, 1.0),
    weights: Sequence[float] | None = None,
    mean_amplitude: float = 0.5,
    nugget: float = 1e-3,
    channel_corr: float = 0.8,
) -> AnalyticModel:
    """Random mixture of smooth Gaussian fields on a small image grid.

    Component ``k`` has covariance ``scales[k] * K(lengths[k]) + nugget I``
    with ``K`` a squared-exponential kernel over pixel positions (times a
    constant channel correlation for 3-D shapes). Means are smooth random
    fields. Component 0 is the narrow, "prompted" one by default.
    """
    if len(scales) != len(lengths):
        raise ConfigError("scales and lengths must have equal length", key="model")
    if len(shape) == 2:
        c, (h, w) = 1, shape
    elif len(shape) == 3:
        c, h, w = shape
    else:
        raise ConfigError(f"grid shape must be (h, w) or (c, h, w), got {shape}", key="model")
    rng = np.random.default_rng(seed)
    chan = np.full((c, c), channel_corr) + (1.0 - channel_corr) * np.eye(c)
    d = c * h * w
    base = np.kron(chan, _grid_kernel(h, w, max(lengths)))
    base_half = np.linalg.cholesky(base + 1e-8 * np.eye(d))
    k = len(scales)
    means = np.stack([mean_amplitude * base_half @ rng.standard_normal(d) for _ in range(k)])
    covs = np.stack(
        [s * np.kron(chan, _grid_kernel(h, w, ell)) + nugget * np.eye(d) for s, ell in zip(scales, lengths)]
    )
    covs = 0.5 * (covs + np.swapaxes(covs, 1, 2))
    if weights is None:
        weights = np.full(k, 1.0 / k)
    return AnalyticModel(np.asarray(weights, dtype=np.float64), means, covs, shape=tuple(shape))
