from dataclasses import replace

import numpy as np
import pytest

from crossed_gva.domain import CompositeParams, Dataset, DimensionMismatchError, ModelParams, VariationalParams
from crossed_gva.family import Family, OverflowGuardError, constant_offset
from crossed_gva.services.elbo import (
    COLUMN_EFFECTS,
    ROW_EFFECTS,
    ParameterLayout,
    composite_elbo,
    composite_elbo_grad,
    composite_elbo_terms,
    full_elbo,
    full_elbo_and_grad,
    full_elbo_grad,
    full_elbo_terms,
)
from crossed_gva.services.quadrature import composite_loglik, marginal_loglik

FAMILIES = [Family.poisson(), Family.gamma(0.8)]


def random_instance(rng, family, m, n, p=1):
    """Small data set with moderate linear predictors plus random (Ψ, Ψ^rc, ξ)."""
    x = rng.normal(0.0, 0.5, (m, n, p))
    eta = 0.3 + x.sum(axis=2) * 0.4 + rng.normal(0.0, 0.4, (m, n))
    if family.alpha is None:
        y = rng.poisson(np.exp(eta)).astype(float)
    else:
        y = rng.gamma(family.alpha, np.exp(eta) / family.alpha)
    data = Dataset(y=y, x=x, family=family)
    psi = ModelParams(
        beta=rng.normal(0.0, 0.3, p + 1),
        sigma2_u=rng.uniform(0.2, 1.0),
        sigma2_v=rng.uniform(0.2, 1.0),
    )
    psi_rc = CompositeParams(
        beta0_r=rng.normal(0.0, 0.3),
        beta0_c=rng.normal(0.0, 0.3),
        slopes=rng.normal(0.0, 0.3, p),
        sigma2_u=rng.uniform(0.2, 1.0),
        sigma2_v=rng.uniform(0.2, 1.0),
    )
    xi = VariationalParams(
        mu_u=rng.normal(0.0, 0.3, m),
        lam_u=rng.uniform(0.2, 1.0, m),
        mu_v=rng.normal(0.0, 0.3, n),
        lam_v=rng.uniform(0.2, 1.0, n),
    )
    return data, psi, psi_rc, xi


def single_cell(family=Family.poisson(), y=0.0):
    data = Dataset(y=[[y]], x=np.zeros((1, 1, 0)), family=family)
    return data, VariationalParams.constant(1, 1, mu=0.0, lam_u=1.0)


def max_relative_error(analytic, numeric):
    return float(np.max(np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)))


def central_differences(f, x, step=1e-5):
    grad = np.empty_like(x)
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = step
        grad[k] = (f(x + e) - f(x - e)) / (2 * step)
    return grad


def test_full_elbo_single_cell():
    data, xi = single_cell()
    psi = ModelParams(beta=[0.0], sigma2_u=1.0, sigma2_v=1.0)
    assert full_elbo(psi, xi, data) == pytest.approx(-np.e - 1, rel=1e-14)


def test_composite_elbo_single_cell():
    data, xi = single_cell()
    psi_rc = CompositeParams(0.0, 0.0, [], 1.0, 1.0)
    terms = composite_elbo_terms(psi_rc, xi, data)
    assert terms.row_data == pytest.approx(-np.exp(0.5))
    assert terms.col_data == pytest.approx(-np.exp(0.5))
    assert terms.row_penalty + terms.col_penalty == pytest.approx(-1.0)
    assert composite_elbo(psi_rc, xi, data) == pytest.approx(-2 * np.exp(0.5) - 1, rel=1e-14)


@pytest.mark.parametrize("family", FAMILIES)
def test_penalties_vanish_at_the_prior(family):
    data, psi, _, _ = random_instance(np.random.default_rng(1), family, 4, 6)
    xi = VariationalParams(
        mu_u=np.zeros(4), lam_u=np.full(4, psi.sigma2_u), mu_v=np.zeros(6), lam_v=np.full(6, psi.sigma2_v)
    )
    terms = full_elbo_terms(psi, xi, data)
    assert terms.row_penalty + terms.col_penalty == pytest.approx(-(4 + 6) / 2)
    assert full_elbo_grad(psi, xi, data).sigma2_u == pytest.approx(0.0, abs=1e-12)


def test_gamma_row_block_is_linear_in_the_mean():
    rng = np.random.default_rng(5)
    family = Family.gamma(1.7)
    data, _, psi_rc, xi = random_instance(rng, family, 3, 4)
    terms = composite_elbo_terms(psi_rc, xi, data)

    eta = psi_rc.beta0_r + data.x @ psi_rc.slopes
    s = eta + xi.mu_u[:, None]
    lam = xi.lam_u[:, None]
    expected = family.alpha * np.sum(-data.y * np.exp(-s + lam / 2) - s)
    assert terms.row_data == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("family", FAMILIES)
def test_row_block_is_full_bound_without_column_effects(family):
    data, _, psi_rc, xi = random_instance(np.random.default_rng(9), family, 3, 5)
    psi = ModelParams(np.concatenate(([psi_rc.beta0_r], psi_rc.slopes)), psi_rc.sigma2_u, psi_rc.sigma2_v)
    no_columns = replace(xi, mu_v=np.zeros(data.n), lam_v=np.full(data.n, 1e-300))

    full = full_elbo_terms(psi, no_columns, data)
    composite = composite_elbo_terms(psi_rc, xi, data)
    assert full.data + full.row_penalty == pytest.approx(composite.row_block, rel=1e-12)


@pytest.mark.parametrize("family", FAMILIES)
@pytest.mark.parametrize("composite", [False, True])
def test_gradients_match_central_differences(family, composite):
    rng = np.random.default_rng(2024 + composite)
    for _ in range(20):
        data, psi, psi_rc, xi = random_instance(rng, family, 5, 7)
        layout = ParameterLayout.for_data(data, composite)
        params = psi_rc if composite else psi
        objective = composite_elbo if composite else full_elbo
        gradient = composite_elbo_grad if composite else full_elbo_grad

        vector = layout.pack(params, xi)
        analytic = layout.pack_gradient(gradient(params, xi, data), params, xi)
        numeric = central_differences(lambda v: objective(*layout.unpack(v), data), vector)
        assert max_relative_error(analytic, numeric) < 1e-6


@pytest.mark.parametrize("family", FAMILIES)
def test_natural_scale_variance_gradient(family):
    data, psi, _, xi = random_instance(np.random.default_rng(4), family, 5, 7)
    analytic = full_elbo_grad(psi, xi, data).sigma2_v
    h = 1e-5
    numeric = (
        full_elbo(replace(psi, sigma2_v=psi.sigma2_v + h), xi, data)
        - full_elbo(replace(psi, sigma2_v=psi.sigma2_v - h), xi, data)
    ) / (2 * h)
    assert max_relative_error(np.array(analytic), np.array(numeric)) < 1e-6


def test_value_and_gradient_agree_with_separate_calls():
    data, psi, _, xi = random_instance(np.random.default_rng(6), Family.poisson(), 4, 3)
    value, grad = full_elbo_and_grad(psi, xi, data)
    assert value == pytest.approx(full_elbo(psi, xi, data), rel=1e-14)
    np.testing.assert_array_equal(grad.mu_v, full_elbo_grad(psi, xi, data).mu_v)


def test_composite_intercept_gradients_are_separable():
    data, _, psi_rc, xi = random_instance(np.random.default_rng(11), Family.poisson(), 4, 4)
    before = composite_elbo_grad(psi_rc, xi, data)
    after = composite_elbo_grad(replace(psi_rc, beta0_c=psi_rc.beta0_c + 0.7), xi, data)
    assert after.beta0_r == before.beta0_r
    assert after.beta0_c != before.beta0_c


@pytest.mark.parametrize("composite", [False, True])
def test_poisson_bound_concave_in_each_mean(composite):
    data, psi, psi_rc, xi = random_instance(np.random.default_rng(12), Family.poisson(), 3, 4)
    params = psi_rc if composite else psi
    objective = composite_elbo if composite else full_elbo
    grid = np.linspace(-2.0, 2.0, 41)
    for field, size in (("mu_u", 3), ("mu_v", 4)):
        for k in range(size):
            values = []
            for value in grid:
                mu = getattr(xi, field).copy()
                mu[k] = value
                values.append(objective(params, replace(xi, **{field: mu}), data))
            assert np.all(np.diff(values, 2) <= 1e-9)


@pytest.mark.parametrize("family", FAMILIES)
@pytest.mark.parametrize("shape", [(2, 2), (3, 2)])
def test_bounds_lie_below_exact_log_likelihoods(family, shape):
    rng = np.random.default_rng([len(family.name), *shape])
    for _ in range(25):
        data, psi, psi_rc, xi = random_instance(rng, family, *shape)
        assert full_elbo(psi, xi, data) + constant_offset(data) <= marginal_loglik(psi, data) + 1e-6
        assert composite_elbo(psi_rc, xi, data) + constant_offset(data, composite=True) <= (
            composite_loglik(psi_rc, data) + 1e-6
        )


def test_dimension_checks():
    data, psi, psi_rc, xi = random_instance(np.random.default_rng(0), Family.poisson(), 3, 3)
    with pytest.raises(DimensionMismatchError):
        full_elbo(psi, VariationalParams.constant(2, 3, 0.0, 1.0), data)
    with pytest.raises(DimensionMismatchError):
        composite_elbo(replace(psi_rc, slopes=np.zeros(2)), xi, data)


def test_overflow_names_the_offending_block():
    data, psi, _, xi = random_instance(np.random.default_rng(0), Family.poisson(), 2, 2)
    with pytest.raises(OverflowGuardError) as e:
        full_elbo(psi, replace(xi, mu_u=np.array([800.0, 0.0])), data)
    assert e.value.block == ROW_EFFECTS

    with pytest.raises(OverflowGuardError) as e:
        full_elbo(psi, replace(xi, lam_v=np.array([0.5, 1800.0])), data)
    assert e.value.block == COLUMN_EFFECTS


def test_layout_round_trip_and_names():
    data, psi, psi_rc, xi = random_instance(np.random.default_rng(1), Family.poisson(), 3, 2, p=2)
    for composite, params in ((False, psi), (True, psi_rc)):
        layout = ParameterLayout.for_data(data, composite)
        vector = layout.pack(params, xi)
        assert vector.size == layout.size == len(layout.names())
        back, back_xi = layout.unpack(vector)
        np.testing.assert_allclose(back_xi.lam_u, xi.lam_u, rtol=1e-14)
        assert back.sigma2_v == pytest.approx(params.sigma2_v, rel=1e-14)

    layout = ParameterLayout.for_data(data, composite=True)
    assert layout.names()[:4] == ["beta0_r", "beta0_c", "beta1", "beta2"]
    assert layout.block_of(layout.slices["mu_v"].start) == COLUMN_EFFECTS
    lower, upper = layout.bounds(1e-6, 100.0)
    assert lower[layout.slices["log_sigma2"]][0] == pytest.approx(np.log(1e-6))
    assert np.isinf(upper[layout.slices["mu_u"]]).all()
    assert layout.variational_mask().sum() == 2 * (data.m + data.n)
