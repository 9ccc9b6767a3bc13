import math

import numpy as np
import pytest
from scipy.integrate import trapezoid
from scipy.special import expit

from crossed_gva.domain import CompositeParams, Dataset, ModelParams
from crossed_gva.family import Family, UnsupportedFamilyError, log_density
from crossed_gva.services.optimizer import FitConfig
from crossed_gva.services.quadrature import (
    CorrectionError,
    QuadratureError,
    aghq_1d,
    apply_conjectured_correction,
    composite_loglik,
    find_mode,
    fit_logistic_experimental,
    gauss_hermite,
    logistic_cell_kernel,
    logistic_e_btheta_2d,
    marginal_loglik,
)
from crossed_gva.services.simulator import SimSpec, simulate


def normal_moment(degree):
    # E Z^d for Z ~ N(0, 1)
    return 0.0 if degree % 2 else float(math.prod(range(degree - 1, 0, -2)))


def test_weights_sum_to_one():
    for n_nodes in (1, 2, 7, 30, 100):
        assert gauss_hermite(n_nodes).weights.sum() == pytest.approx(1.0, abs=1e-13)


@pytest.mark.parametrize("n_nodes", [5, 10, 20, 50])
def test_polynomial_exactness(n_nodes):
    rule = gauss_hermite(n_nodes)
    for degree in range(2 * n_nodes):
        terms = rule.weights * rule.nodes**degree
        if degree % 2:
            assert abs(terms.sum()) <= 1e-10 * np.sum(np.abs(terms))
        else:
            assert terms.sum() == pytest.approx(normal_moment(degree), rel=1e-10)


def test_node_count_limits():
    with pytest.raises(QuadratureError):
        gauss_hermite(0)
    with pytest.raises(QuadratureError):
        gauss_hermite(101)


def test_expectation_under_a_shifted_normal():
    rule = gauss_hermite(20)
    assert rule.expect(np.exp, mean=1.0, var=0.5) == pytest.approx(np.exp(1.25), rel=1e-12)
    np.testing.assert_allclose(rule.expect(np.square, mean=[0.0, 2.0], var=[1.0, 3.0]), [1.0, 7.0])


def test_aghq_exact_on_gaussian_integrands():
    def f(x):
        return -((x - 2.0) ** 2) / (2 * 0.3)

    expected = 0.5 * np.log(2 * np.pi * 0.3)
    assert aghq_1d(f, mode=2.0, curvature=1 / 0.3, n_nodes=1) == pytest.approx(expected, rel=1e-14)
    assert aghq_1d(f, n_nodes=1) == pytest.approx(expected, rel=1e-8)


def test_find_mode_is_elementwise():
    centres = np.array([-1.0, 0.5, 3.0])
    scales = np.array([0.5, 2.0, 1.0])

    def f(x):
        c = centres.reshape(centres.shape + (1,) * (np.ndim(x) - 1))
        a = scales.reshape(c.shape)
        return -a * (x - c) ** 2

    mode, curvature = find_mode(f, np.zeros(3))
    np.testing.assert_allclose(mode, centres, atol=1e-8)
    np.testing.assert_allclose(curvature, 2 * scales, rtol=1e-5)


def test_find_mode_rejects_convex_integrands():
    with pytest.raises(QuadratureError):
        find_mode(lambda x: x**2, 1.0)


def brute_force_block(family, y, eta, sigma2):
    grid = np.linspace(-10 * np.sqrt(sigma2), 10 * np.sqrt(sigma2), 1_000_001)
    log_values = np.sum(log_density(family, y[:, None], eta[:, None] + grid), axis=0)
    log_values += -0.5 * np.log(2 * np.pi * sigma2) - grid**2 / (2 * sigma2)
    return np.log(trapezoid(np.exp(log_values), grid))


@pytest.mark.parametrize("family", [Family.poisson(), Family.gamma(1.5)])
def test_composite_loglik_matches_dense_grid(family):
    y = np.array([[2.0, 1.0]]) if family.alpha is None else np.array([[0.7, 1.9]])
    x = np.array([[[0.3], [-0.4]]])
    data = Dataset(y=y, x=x, family=family)
    psi_rc = CompositeParams(0.2, -0.1, [0.5], 0.6, 0.4)

    eta_r = 0.2 + 0.5 * x[0, :, 0]
    eta_c = -0.1 + 0.5 * x[0, :, 0]
    expected = brute_force_block(family, y[0], eta_r, 0.6)
    expected += sum(brute_force_block(family, y[:, j], eta_c[j : j + 1], 0.4) for j in range(2))
    assert composite_loglik(psi_rc, data) == pytest.approx(expected, abs=1e-8)


def test_marginal_loglik_single_cell():
    # with one cell U + V ~ N(0, σ²_u + σ²_v)
    family = Family.poisson()
    data = Dataset(y=[[3.0]], x=np.zeros((1, 1, 0)), family=family)
    psi = ModelParams([0.4], 0.3, 0.5)
    expected = brute_force_block(family, np.array([3.0]), np.array([0.4]), 0.8)
    assert marginal_loglik(psi, data) == pytest.approx(expected, abs=1e-7)


def test_marginal_loglik_refuses_large_grids():
    data = Dataset(y=np.ones((5, 5)), x=np.zeros((5, 5, 0)), family=Family.poisson())
    with pytest.raises(QuadratureError):
        marginal_loglik(ModelParams([0.0], 1.0, 1.0), data)


def test_logistic_two_dimensional_expectation_matches_monte_carlo():
    rng = np.random.default_rng(17)
    draws = np.logaddexp(0.0, rng.normal(size=1_000_000) + rng.normal(size=1_000_000))
    quadrature = logistic_e_btheta_2d(0.0, 0.0, 1.0, 0.0, 1.0, 30, 30)
    assert abs(draws.mean() - quadrature) < 4 * draws.std(ddof=1) / 1000


def test_logistic_kernel_consistent_with_product_rule():
    kernel = logistic_cell_kernel(30)
    s, lam_u, lam_v = np.array([-0.5, 0.2]), np.array([0.3, 0.8]), np.array([0.4, 0.1])
    value, _, _ = kernel(np.zeros(2), s, lam_u + lam_v)
    product = logistic_e_btheta_2d(s, 0.0, lam_u, 0.0, lam_v, 30, 30)
    np.testing.assert_allclose(-value, product, rtol=1e-8)


def test_logistic_kernel_converges_in_node_count():
    s, lam = np.linspace(-2, 2, 9), np.linspace(0.1, 0.3, 9)
    y = (s > 0).astype(float)
    coarse, _, _ = logistic_cell_kernel(15)(y, s, lam)
    fine, _, _ = logistic_cell_kernel(40)(y, s, lam)
    np.testing.assert_allclose(coarse, fine, rtol=1e-9)


def test_logistic_kernel_derivatives():
    kernel = logistic_cell_kernel(20)
    y, s, lam = np.array([0.0, 1.0, 1.0]), np.array([-1.0, 0.3, 2.0]), np.array([0.5, 1.2, 0.2])
    _, d_s, d_lam = kernel(y, s, lam)
    h = 1e-6
    np.testing.assert_allclose(d_s, (kernel(y, s + h, lam)[0] - kernel(y, s - h, lam)[0]) / (2 * h), rtol=1e-6, atol=1e-9)
    np.testing.assert_allclose(d_lam, (kernel(y, s, lam + h)[0] - kernel(y, s, lam - h)[0]) / (2 * h), rtol=1e-6, atol=1e-9)
    np.testing.assert_allclose(y - d_s, expit(s), atol=0.1)


def test_conjectured_correction():
    beta0, slopes, denominator = apply_conjectured_correction(1.0, 2.0, [3.0], 1.0, 1.0)
    assert denominator == pytest.approx(0.8)
    assert beta0 == pytest.approx(3.0 / 1.6)
    np.testing.assert_allclose(slopes, [3.75])
    with pytest.raises(CorrectionError):
        apply_conjectured_correction(0.0, 0.0, [1.0], 5.0, 5.0)


def test_experimental_logistic_fit():
    data = simulate(SimSpec(family="logistic", beta=(0.5, -0.5), m=30, n=30, seed=2)).data
    result = fit_logistic_experimental(data, FitConfig(quad_nodes=10))
    raw = result.raw_composite
    assert result.experimental == "conjectured correction"
    assert result.method.composite
    assert np.all(np.diff(result.elbo_trace) >= -1e-10)
    denominator = result.diagnostics["correction_denominator"]
    assert denominator == pytest.approx(1 - 0.1 * (raw.sigma2_u + raw.sigma2_v))
    assert result.diagnostics["uncorrected_beta1"] == pytest.approx(raw.slopes[0])
    assert result.estimates.beta[1] == pytest.approx(raw.slopes[0] / denominator)


def test_experimental_fit_is_logistic_only():
    data = simulate(SimSpec(family="poisson", m=5, n=5, seed=0)).data
    with pytest.raises(UnsupportedFamilyError):
        fit_logistic_experimental(data)
