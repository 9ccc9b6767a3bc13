import numpy as np
import pytest

from crossed_gva import family as family_module
from crossed_gva.family import (
    Family,
    FamilyTag,
    OverflowGuardError,
    ResponseDomainError,
    UnsupportedFamilyError,
    cell_kernel,
    check_response,
    e_btheta_col,
    e_btheta_joint,
    e_btheta_row,
    e_theta_col,
    e_theta_joint,
    e_theta_row,
    guarded_exp,
    log_density,
)

POISSON = Family.poisson()
GAMMA = Family.gamma(0.8)


def test_family_construction():
    assert Family.parse("Poisson") == POISSON
    assert Family.parse("gamma", 2.0).alpha == 2.0
    # the shape is ignored for families that carry none
    assert Family.parse("logistic", 3.0).alpha is None
    assert GAMMA.data_weight == 0.8
    assert POISSON.data_weight == 1.0
    assert not Family.logistic().has_closed_form

    with pytest.raises(ValueError):
        Family.gamma(0.0)
    with pytest.raises(ValueError):
        Family(FamilyTag.GAMMA)
    with pytest.raises(ValueError):
        Family(FamilyTag.POISSON, 1.0)


@pytest.mark.parametrize(
    "family, args, expected",
    [
        (POISSON, (0, 0, 0, 0, 0), 0.0),
        (Family.gamma(1.0), (0, 0, 0, 0, 0), -1.0),
        (Family.gamma(1.0), (1, 0.5, 0.2, -0.5, 0.4), -np.exp(-0.7)),
    ],
)
def test_e_theta_joint_examples(family, args, expected):
    assert e_theta_joint(family, *args) == pytest.approx(expected, rel=1e-14)


@pytest.mark.parametrize(
    "family, args, expected",
    [
        (POISSON, (0, 0, 0, 0, 0), 1.0),
        (POISSON, (1, 0, 2, 0, 0), np.exp(2)),
        (Family.gamma(1.0), (2, 0.3, 5, -0.3, 7), 2.0),
    ],
)
def test_e_btheta_joint_examples(family, args, expected):
    assert e_btheta_joint(family, *args) == pytest.approx(expected, rel=1e-14)


def test_single_effect_examples():
    assert e_btheta_row(POISSON, 0, 0, 0) == pytest.approx(1.0)
    assert e_theta_row(Family.gamma(1.0), 0, 0, 0) == pytest.approx(-1.0)
    assert e_btheta_row(POISSON, 1, 0.5, 1) == pytest.approx(np.exp(2))


@pytest.mark.parametrize("family", [POISSON, GAMMA])
def test_single_effect_matches_joint_with_other_effect_removed(family):
    rng = np.random.default_rng(3)
    eta, mu, lam = rng.normal(size=5), rng.normal(size=5), rng.uniform(0.1, 2, size=5)
    np.testing.assert_allclose(e_theta_row(family, eta, mu, lam), e_theta_joint(family, eta, mu, lam, 0, 0))
    np.testing.assert_allclose(e_btheta_row(family, eta, mu, lam), e_btheta_joint(family, eta, mu, lam, 0, 0))
    np.testing.assert_allclose(e_theta_col(family, eta, mu, lam), e_theta_joint(family, eta, 0, 0, mu, lam))
    np.testing.assert_allclose(e_btheta_col(family, eta, mu, lam), e_btheta_joint(family, eta, 0, 0, mu, lam))


@pytest.mark.parametrize("family", [POISSON, GAMMA])
def test_expectations_match_monte_carlo(family):
    rng = np.random.default_rng(20240611)
    eta, mu_u, lam_u, mu_v, lam_v = 0.3, 0.2, 0.4, -0.1, 0.3
    u = rng.normal(mu_u, np.sqrt(lam_u), 1_000_000)
    v = rng.normal(mu_v, np.sqrt(lam_v), 1_000_000)
    s = eta + u + v
    if family.tag is FamilyTag.POISSON:
        theta, btheta = s, np.exp(s)
    else:
        theta, btheta = -np.exp(-s), s

    for draws, closed in (
        (theta, e_theta_joint(family, eta, mu_u, lam_u, mu_v, lam_v)),
        (btheta, e_btheta_joint(family, eta, mu_u, lam_u, mu_v, lam_v)),
    ):
        se = draws.std(ddof=1) / np.sqrt(draws.size)
        assert abs(draws.mean() - closed) < 4 * se


def test_poisson_btheta_increasing_in_every_argument():
    base = np.array([0.1, 0.2, 0.3, -0.2, 0.5])
    value = e_btheta_joint(POISSON, *base)
    for k in range(base.size):
        bumped = base.copy()
        bumped[k] += 0.01
        assert e_btheta_joint(POISSON, *bumped) > value


def test_logistic_has_no_closed_form():
    with pytest.raises(UnsupportedFamilyError) as e:
        e_theta_joint(Family.logistic(), 0, 0, 0, 0, 0)
    assert "logistic" in str(e.value)
    with pytest.raises(UnsupportedFamilyError):
        cell_kernel(Family.logistic())


def test_overflow_guard(monkeypatch):
    with pytest.raises(OverflowGuardError) as e:
        e_btheta_joint(POISSON, 701, 0, 0, 0, 0)
    assert e.value.exponent == pytest.approx(701)

    monkeypatch.setattr(family_module.config, "exp_cap", 1.0)
    with pytest.raises(OverflowGuardError):
        guarded_exp([0.5, 1.5])
    assert guarded_exp([0.5, 1.0])[1] == pytest.approx(np.e)


@pytest.mark.parametrize("family", [POISSON, GAMMA])
def test_cell_kernel_derivatives(family):
    rng = np.random.default_rng(8)
    y = rng.poisson(2.0, 6).astype(float) + (0.5 if family is GAMMA else 0.0)
    s, lam = rng.normal(size=6), rng.uniform(0.2, 1.0, 6)
    kernel = cell_kernel(family)
    _, d_s, d_lam = kernel(y, s, lam)
    h = 1e-6
    fd_s = (kernel(y, s + h, lam)[0] - kernel(y, s - h, lam)[0]) / (2 * h)
    fd_lam = (kernel(y, s, lam + h)[0] - kernel(y, s, lam - h)[0]) / (2 * h)
    np.testing.assert_allclose(d_s, fd_s, rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(d_lam, fd_lam, rtol=1e-6, atol=1e-8)


@pytest.mark.parametrize(
    "family, y, eta, expected",
    [
        (POISSON, 0, 0, -1.0),
        (POISSON, 1, 0, -1.0),
        (Family.gamma(1.0), 1, 0, -1.0),
        (Family.logistic(), 1, 0, -np.log(2)),
    ],
)
def test_log_density_examples(family, y, eta, expected):
    assert log_density(family, y, eta) == pytest.approx(expected, rel=1e-14)


def test_gamma_log_density_integrates_to_one():
    from scipy.integrate import trapezoid

    y = np.linspace(1e-8, 60, 2_000_001)
    density = np.exp(log_density(Family.gamma(2.5), y, 0.7))
    assert trapezoid(density, y) == pytest.approx(1.0, abs=1e-6)


@pytest.mark.parametrize(
    "family, y",
    [
        (POISSON, [1, -1]),
        (POISSON, [0.5]),
        (GAMMA, [0.0]),
        (Family.logistic(), [2]),
        (POISSON, [np.nan]),
    ],
)
def test_check_response_rejects_out_of_domain(family, y):
    with pytest.raises(ResponseDomainError):
        check_response(family, y)
