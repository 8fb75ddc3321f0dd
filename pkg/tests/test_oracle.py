import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from polaris_lab.errors import ConfigError, DegenerateTimestepError
from polaris_lab.oracle import (
    UNCONDITIONAL,
    AnalyticModel,
    Condition,
    PerturbedOracle,
    grid_mixture,
    perturbed,
    unwrap,
)


def unit_gaussian(d=2):
    return AnalyticModel(np.array([1.0]), np.zeros((1, d)), np.eye(d)[None])


def test_unit_gaussian_noise_prediction():
    m = unit_gaussian()
    np.testing.assert_allclose(m.predict_noise(np.array([2.0, 0.0]), UNCONDITIONAL, 0.75), [1.0, 0.0], atol=1e-15)


def test_prediction_vanishes_at_scaled_mean():
    mu = np.array([0.7, -1.3, 0.2])
    cov = np.diag([0.5, 1.5, 0.9])
    m = AnalyticModel(np.array([1.0]), mu[None], cov[None])
    a = 0.6
    eps = m.predict_noise(np.sqrt(a) * mu, UNCONDITIONAL, a)
    np.testing.assert_allclose(eps, 0.0, atol=1e-14)


def test_unit_gaussian_posterior_mean():
    m = unit_gaussian(3)
    x = np.array([0.3, -2.0, 1.1])
    np.testing.assert_allclose(m.posterior_mean(x, UNCONDITIONAL, 0.4), np.sqrt(0.4) * x, atol=1e-15)


def test_posterior_mean_matches_linear_solve(rng):
    d = 5
    L = rng.standard_normal((d, d)) * 0.3 + np.eye(d)
    cov = L @ L.T
    mu = rng.standard_normal(d)
    m = AnalyticModel(np.array([1.0]), mu[None], cov[None])
    a = 0.99
    x = rng.standard_normal(d)
    # x0 | x_t is Gaussian; its mean solves (a cov + (1-a) I) k = x - sqrt(a) mu
    k = np.linalg.solve(a * cov + (1 - a) * np.eye(d), x - np.sqrt(a) * mu)
    expected = mu + np.sqrt(a) * cov @ k
    np.testing.assert_allclose(m.posterior_mean(x, UNCONDITIONAL, a), expected, rtol=1e-10, atol=1e-12)


def test_degenerate_mixture_reduces_to_single_gaussian(rng):
    d = 3
    cov = np.array([[1.0, 0.2, 0.0], [0.2, 0.5, 0.1], [0.0, 0.1, 0.8]])
    mu = np.array([0.5, -0.5, 1.0])
    single = AnalyticModel(np.array([1.0]), mu[None], cov[None])
    for _ in range(5):
        x = rng.standard_normal(d)
        for cond in (Condition.component(0), UNCONDITIONAL):
            np.testing.assert_array_equal(
                single.posterior_mean(x, cond, 0.3), single.posterior_mean(x, UNCONDITIONAL, 0.3)
            )


# frozen output of a 300-node Gauss-Legendre quadrature of E[eps | x_t] over x0
QUADRATURE_CASES = [
    ((0.3, -0.2), 0.5, None, (0.12814841676154484, -0.08204225293495239)),
    ((0.3, -0.2), 0.5, (0,), (-0.4597411911601348, 0.21927617220116305)),
    ((-1.0, 0.9), 0.8, None, (0.12308846349701454, 0.1684560184921273)),
    ((0.5, 0.5), 0.3, (1,), (1.3013991380483658, 0.08688407895280188)),
]


@pytest.mark.parametrize("x, a, comps, expected", QUADRATURE_CASES)
def test_mixture_matches_frozen_quadrature(mix2d, x, a, comps, expected):
    eps = mix2d.predict_noise(np.array(x), Condition(comps), a)
    np.testing.assert_allclose(eps, expected, atol=1e-6)


def _quadrature_eps(model, x, a, comps, nodes, half_width):
    d = model.dim
    g, gw = np.polynomial.legendre.leggauss(nodes)
    grids = np.meshgrid(*([g * half_width] * d), indexing="ij")
    pts = np.stack([q.ravel() for q in grids], axis=1)
    weights = np.ones(len(pts))
    for q in np.meshgrid(*([gw * half_width] * d), indexing="ij"):
        weights = weights * q.ravel()
    comps = range(model.n_components) if comps is None else comps
    wsum = sum(model.weights[k] for k in comps)
    prior = sum(model.weights[k] / wsum * stats.multivariate_normal(model.means[k], model.covs[k]).pdf(pts) for k in comps)
    lik = np.exp(-np.sum((x - np.sqrt(a) * pts) ** 2, axis=1) / (2 * (1 - a)))
    f = prior * lik * weights
    m = (f[:, None] * pts).sum(0) / f.sum()
    return (x - np.sqrt(a) * m) / np.sqrt(1 - a)


def test_mixture_matches_live_quadrature_in_three_dims(rng):
    means = np.array([[0.8, 0.0, -0.4], [-0.6, 0.5, 0.3], [0.0, -0.9, 0.2]])
    covs = np.stack([np.diag([0.2, 0.3, 0.25]), np.diag([0.35, 0.15, 0.2]), 0.2 * np.eye(3) + 0.05])
    model = AnalyticModel(np.array([0.2, 0.5, 0.3]), means, covs)
    for comps in (None, (0, 2)):
        x = rng.standard_normal(3) * 0.7
        got = model.predict_noise(x, Condition(comps), 0.55)
        ref = _quadrature_eps(model, x, 0.55, comps, nodes=70, half_width=4.5)
        np.testing.assert_allclose(got, ref, atol=1e-6)


def test_tweedie_identity_by_finite_differences(rng):
    d = 4
    L = np.tril(rng.standard_normal((d, d))) * 0.4 + np.eye(d)
    cov = L @ L.T
    mu = rng.standard_normal(d)
    model = AnalyticModel(np.array([1.0]), mu[None], cov[None])
    a = 0.45
    marg = stats.multivariate_normal(np.sqrt(a) * mu, a * cov + (1 - a) * np.eye(d))
    x = rng.standard_normal(d)
    h = 1e-5
    grad = np.array([(marg.logpdf(x + h * e) - marg.logpdf(x - h * e)) / (2 * h) for e in np.eye(d)])
    expected = -np.sqrt(1 - a) * grad
    got = model.predict_noise(x, UNCONDITIONAL, a)
    assert np.linalg.norm(got - expected) <= 1e-5 * np.linalg.norm(expected)


@pytest.mark.parametrize("a", [1.0, 0.0, 1.5, -0.1])
def test_degenerate_timestep(mix2d, a):
    with pytest.raises(DegenerateTimestepError):
        mix2d.predict_noise(np.zeros(2), UNCONDITIONAL, a)


def test_predictions_are_deterministic(grid_model, rng):
    x = rng.standard_normal(grid_model.dim)
    a = grid_model.predict_noise(x, Condition.component(0), 0.3)
    b = grid_model.predict_noise(x, Condition.component(0), 0.3)
    assert a.tobytes() == b.tobytes()


def test_log_space_responsibilities_do_not_underflow():
    model = AnalyticModel(np.array([0.5, 0.5]), np.array([[50.0], [-50.0]]), np.array([[[1e-3]], [[1e-3]]]))
    r = model.responsibilities(np.array([30.0]), UNCONDITIONAL, 0.999)
    assert np.all(np.isfinite(r)) and r.sum() == pytest.approx(1.0)
    assert np.all(np.isfinite(model.predict_noise(np.array([0.0]), UNCONDITIONAL, 0.999)))


@pytest.mark.parametrize(
    "weights, means, covs",
    [
        ([0.5, 0.6], [[0.0], [1.0]], [[[1.0]], [[1.0]]]),
        ([1.0], [[0.0, 0.0]], [[[1.0, 0.5], [0.4, 1.0]]]),
        ([1.0], [[0.0, 0.0]], [[[1.0, 2.0], [2.0, 1.0]]]),
        ([1.0], [[0.0, 0.0, 0.0]], [[[1.0, 0.0], [0.0, 1.0]]]),
    ],
)
def test_invalid_models_rejected(weights, means, covs):
    with pytest.raises(ConfigError):
        AnalyticModel(np.array(weights), np.array(means), np.array(covs))


def test_bad_condition_index(mix2d):
    with pytest.raises(ConfigError):
        mix2d.predict_noise(np.zeros(2), Condition.component(5), 0.5)


def test_condition_kinds():
    assert UNCONDITIONAL.kind == "unconditional"
    assert Condition.component(1).kind == "component"
    assert Condition.subset([2, 0, 2]).indices == (0, 2)
    assert Condition.subset([0, 1]).kind == "subset"


def test_from_cholesky():
    L = np.array([[1.0, 0.0], [0.5, 2.0]])
    m = AnalyticModel.from_cholesky([1.0], [[0.0, 0.0]], [L])
    np.testing.assert_allclose(m.covs[0], L @ L.T)


def test_zero_noise_wrapper_is_bitwise_transparent(grid_model, rng):
    wrapped = perturbed(grid_model, 0.0, 7)
    for _ in range(5):
        x = rng.standard_normal(grid_model.dim)
        assert wrapped.predict_noise(x, UNCONDITIONAL, 0.2).tobytes() == grid_model.predict_noise(x, UNCONDITIONAL, 0.2).tobytes()


def test_perturbation_is_reproducible(mix2d):
    x = np.array([0.1, 0.2])
    a = PerturbedOracle(mix2d, 0.3, 11)
    b = PerturbedOracle(mix2d, 0.3, 11)
    seq_a = [a.predict_noise(x, UNCONDITIONAL, 0.5) for _ in range(4)]
    seq_b = [b.predict_noise(x, UNCONDITIONAL, 0.5) for _ in range(4)]
    for u, v in zip(seq_a, seq_b):
        assert u.tobytes() == v.tobytes()
    assert not np.array_equal(seq_a[0], seq_a[1])
    assert unwrap(a) is mix2d


def test_perturbation_statistics():
    model = AnalyticModel(np.array([1.0]), np.zeros((1, 1)), np.eye(1)[None])
    orc = PerturbedOracle(model, 0.25, 3)
    n = 100_000
    draws = np.array([orc.delta(i)[0] for i in range(n)])
    assert abs(draws.mean()) <= 4 * 0.25 / np.sqrt(n)
    assert draws.std() == pytest.approx(0.25, rel=0.02)


def test_negative_noise_rejected(mix2d):
    with pytest.raises(ConfigError):
        perturbed(mix2d, -1.0, 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.05, 0.95))
def test_grid_mixture_predictions_finite(seed, a):
    m = grid_mixture(seed % 7, shape=(4, 4))
    x = np.random.default_rng(seed).standard_normal(16) * 3
    for cond in (UNCONDITIONAL, Condition.component(0), Condition.component(1)):
        assert np.all(np.isfinite(m.predict_noise(x, cond, a)))


def test_grid_mixture_colour_shape():
    m = grid_mixture(1, shape=(3, 4, 4))
    assert m.dim == 48 and m.shape == (3, 4, 4)
    s = m.sample(np.random.default_rng(0), Condition.component(0))
    assert s.shape == (48,)


def test_sampling_follows_component_statistics():
    model = AnalyticModel(np.array([0.3, 0.7]), np.array([[2.0, 0.0], [-1.0, 1.0]]),
                          np.array([np.diag([0.5, 0.2]), np.diag([0.1, 0.3])]))
    rng = np.random.default_rng(5)
    xs = np.array([model.sample(rng, Condition.component(0)) for _ in range(20000)])
    np.testing.assert_allclose(xs.mean(0), [2.0, 0.0], atol=0.03)
    np.testing.assert_allclose(np.cov(xs.T), np.diag([0.5, 0.2]), atol=0.02)


def test_vjp_matches_finite_differences(grid_model, rng):
    d = grid_model.dim
    x = rng.standard_normal(d)
    v = rng.standard_normal(d)
    for cond in (UNCONDITIONAL, Condition.component(1)):
        got = grid_model.posterior_mean_vjp(x, cond, 0.3, v)
        h = 1e-6
        fd = np.array(
            [
                v @ (grid_model.posterior_mean(x + h * e, cond, 0.3) - grid_model.posterior_mean(x - h * e, cond, 0.3)) / (2 * h)
                for e in np.eye(d)
            ]
        )
        assert np.linalg.norm(got - fd) <= 1e-6 * np.linalg.norm(fd)
