# Copyright 2024 IBM Corp.
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

"""
Gauss-Hermite and adaptive Gauss-Hermite integration.

Rules use the probabilists' convention: Σ w_k f(x_k) ≈ E f(Z) with Z ~ N(0, 1), so the
weights sum to one. Besides the experimental logistic model, the module provides the
exact (composite) log-likelihood oracles that the variational bounds are checked against.
"""

from __future__ import annotations

import functools
import logging
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from numpy.typing import ArrayLike, NDArray
from scipy.special import expit, logsumexp

from crossed_gva.config import Config
from crossed_gva.domain import CompositeParams, Dataset, ModelParams
from crossed_gva.family import CellKernel, FamilyTag, UnsupportedFamilyError, log_density
from crossed_gva.services.optimizer import FitConfig, FitResult, Method, fit

logger = logging.getLogger("quadrature")
config = Config()

LogIntegrand = Callable[[NDArray], NDArray]

_LOG_SQRT_2PI = 0.5 * np.log(2 * np.pi)


@dataclass
class QuadratureError(Exception):
    detail: str

    def __str__(self) -> str:
        return f"quadrature failed: {self.detail}"


@dataclass
class CorrectionError(Exception):
    denominator: float

    def __str__(self) -> str:
        return f"conjectured correction denominator 1 - 0.1(σ²_u + σ²_v) = {self.denominator:.4g} is not positive"


@dataclass(frozen=True)
class QuadRule:
    nodes: NDArray
    weights: NDArray

    @property
    def size(self) -> int:
        return self.nodes.size

    def expect(self, f: Callable[[NDArray], NDArray], mean=0.0, var=1.0) -> NDArray:
        """E f(X) for X ~ N(mean, var); mean and var broadcast against each other."""
        mean = np.asarray(mean, dtype=np.float64)[..., None]
        sd = np.sqrt(np.asarray(var, dtype=np.float64))[..., None]
        return np.sum(self.weights * f(mean + sd * self.nodes), axis=-1)


@functools.lru_cache(maxsize=None)
def _rule(n_nodes: int) -> QuadRule:
    nodes, weights = hermegauss(n_nodes)
    nodes.flags.writeable = False
    weights = weights / np.sqrt(2 * np.pi)
    weights.flags.writeable = False
    return QuadRule(nodes=nodes, weights=weights)


def gauss_hermite(n_nodes: int) -> QuadRule:
    if not 1 <= n_nodes <= 100:
        raise QuadratureError(f"the number of nodes must lie in [1, 100], got {n_nodes}")
    return _rule(int(n_nodes))


def find_mode(
    f: LogIntegrand,
    start: ArrayLike = 0.0,
    derivatives: tuple[LogIntegrand, LogIntegrand] | None = None,
    max_steps: int = 20,
) -> tuple[NDArray, NDArray]:
    """
    Safeguarded Newton search for the maximum of an elementwise log-integrand.

    `f` maps an array of points to an array of the same shape, each element being an
    independent problem. Returns the modes and the curvatures -f''(mode).
    """
    x = np.array(start, dtype=np.float64)
    if derivatives is None:

        def d1(z):
            h = 1e-4 * (1 + np.abs(z))
            return (f(z + h) - f(z - h)) / (2 * h)

        def d2(z):
            h = 1e-3 * (1 + np.abs(z))
            return (f(z + h) - 2 * f(z) + f(z - h)) / h**2

    else:
        d1, d2 = derivatives

    value = f(x)
    for _ in range(max_steps):
        g, h = d1(x), d2(x)
        step = np.where(h < 0, -g / np.where(h < 0, h, -1.0), np.sign(g) * np.minimum(np.abs(g), 1.0))
        for _ in range(30):
            trial = x + step
            trial_value = f(trial)
            worse = ~(trial_value >= value)
            if not np.any(worse):
                break
            step = np.where(worse, step / 2, step)
        else:
            trial = np.where(worse, x, trial)
            trial_value = np.where(worse, value, trial_value)
        x, value = trial, trial_value
        if np.all(np.abs(step) <= 1e-10 * (1 + np.abs(x))):
            break

    curvature = -d2(x)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(curvature)) and np.all(curvature > 0)):
        raise QuadratureError("mode search did not reach a point of negative curvature")
    return x, curvature


def aghq_1d(
    f: LogIntegrand,
    mode: ArrayLike | None = None,
    curvature: ArrayLike | None = None,
    n_nodes: int | None = None,
    derivatives: tuple[LogIntegrand, LogIntegrand] | None = None,
):
    """
    log ∫ exp(f(x)) dx with nodes recentred at the mode and scaled by 1/√curvature.

    The mode and curvature are found by `find_mode` when not supplied. `f` must
    broadcast over a trailing node axis. Scalars in, float out.
    """
    rule = gauss_hermite(n_nodes or config.quad_nodes_1d)
    if mode is None or curvature is None:
        mode, curvature = find_mode(f, 0.0 if mode is None else mode, derivatives)
    mode = np.asarray(mode, dtype=np.float64)
    curvature = np.asarray(curvature, dtype=np.float64)
    if np.any(curvature <= 0):
        raise QuadratureError("curvature at the mode must be positive")

    scale = 1 / np.sqrt(curvature)
    points = mode[..., None] + scale[..., None] * rule.nodes
    values = f(points)
    if not np.all(np.isfinite(values)):
        raise QuadratureError("non-finite integrand at a quadrature node")
    result = np.log(scale) + _LOG_SQRT_2PI + logsumexp(values + rule.nodes**2 / 2, b=rule.weights, axis=-1)
    return float(result) if result.ndim == 0 else result


def _softplus(x: NDArray) -> NDArray:
    return np.logaddexp(0.0, x)


def logistic_e_btheta_2d(eta, mu_u, lam_u, mu_v, lam_v, n1: int | None = None, n2: int | None = None):
    """E log(1 + exp(η + U + V)) for independent U ~ N(μ_u, λ_u), V ~ N(μ_v, λ_v) by a product rule."""
    rule_u = gauss_hermite(n1 or config.quad_nodes_2d)
    rule_v = gauss_hermite(n2 or config.quad_nodes_2d)
    centre = np.asarray(np.add(np.add(eta, mu_u), mu_v), dtype=np.float64)[..., None, None]
    u = np.sqrt(np.asarray(lam_u, dtype=np.float64))[..., None, None] * rule_u.nodes[:, None]
    v = np.sqrt(np.asarray(lam_v, dtype=np.float64))[..., None, None] * rule_v.nodes[None, :]
    weights = rule_u.weights[:, None] * rule_v.weights[None, :]
    result = np.sum(weights * _softplus(centre + u + v), axis=(-2, -1))
    return float(result) if result.ndim == 0 else result


def logistic_cell_kernel(n_nodes: int | None = None) -> CellKernel:
    """
    Cell kernel y·s - E log(1 + exp(s + √lam·Z)) of the logistic bound, with the exact
    derivatives of its Gauss-Hermite approximation.
    """
    rule = gauss_hermite(n_nodes or config.quad_nodes_1d)

    def kernel(y: NDArray, s: NDArray, lam: NDArray):
        root = np.sqrt(lam)[..., None]
        points = s[..., None] + root * rule.nodes
        prob = expit(points)
        value = y * s - np.sum(rule.weights * _softplus(points), axis=-1)
        d_s = y - np.sum(rule.weights * prob, axis=-1)
        d_lam = -np.sum(rule.weights * prob * rule.nodes, axis=-1) / (2 * root[..., 0])
        return value, d_s, d_lam

    return kernel


def _normal_logpdf(x: NDArray, sigma2: float) -> NDArray:
    return -0.5 * np.log(2 * np.pi * sigma2) - x**2 / (2 * sigma2)


def _effect_block(family, y: NDArray, eta: NDArray, sigma2: float) -> LogIntegrand:
    """
    Log-integrand of one effect shared by a block of cells.

    `y` and `eta` have shape batch + (cells,); the effect has shape batch or batch + (nodes,).
    """
    batch = eta.ndim - 1

    def f(effect: NDArray) -> NDArray:
        extra = effect.ndim - batch
        lin = eta.reshape(eta.shape[:batch] + (eta.shape[-1],) + (1,) * extra)
        obs = y.reshape(y.shape[:batch] + (y.shape[-1],) + (1,) * extra)
        shared = np.expand_dims(effect, batch)
        return np.sum(log_density(family, obs, lin + shared), axis=batch) + _normal_logpdf(effect, sigma2)

    return f


def composite_loglik(psi_rc: CompositeParams, data: Dataset, n_nodes: int = 30) -> float:
    """
    Exact row-column composite log-likelihood: Σ_i log ∫ Π_j p(y_ij | β₀^r + x'β + u) φ(u) du
    plus the column analogue, each integral by adaptive Gauss-Hermite.
    """
    slope_part = data.linear_predictor(0.0, psi_rc.slopes)
    rows = _effect_block(data.family, data.y, psi_rc.beta0_r + slope_part, psi_rc.sigma2_u)
    cols = _effect_block(data.family, data.y.T, (psi_rc.beta0_c + slope_part).T, psi_rc.sigma2_v)
    row_terms = aghq_1d(rows, *find_mode(rows, np.zeros(data.m)), n_nodes=n_nodes)
    col_terms = aghq_1d(cols, *find_mode(cols, np.zeros(data.n)), n_nodes=n_nodes)
    return float(np.sum(row_terms) + np.sum(col_terms))


def marginal_loglik(psi: ModelParams, data: Dataset, n_nodes: int = 30) -> float:
    """
    Exact marginal log-likelihood for tiny grids.

    The smaller effect set is integrated by a tensor Gauss-Hermite rule over its prior;
    given those effects the other set factorizes into one-dimensional adaptive integrals.
    """
    eta = data.linear_predictor(psi.beta[0], psi.beta[1:])
    y, sigma2_inner, sigma2_outer = data.y, psi.sigma2_u, psi.sigma2_v
    if data.n > data.m:
        y, eta, sigma2_inner, sigma2_outer = y.T, eta.T, psi.sigma2_v, psi.sigma2_u
    inner_count, outer_count = y.shape
    if outer_count > 4:
        raise QuadratureError(f"the tensor rule over {outer_count} effects is too large")

    rule = gauss_hermite(n_nodes)
    grids = np.meshgrid(*([rule.nodes] * outer_count), indexing="ij")
    outer = np.sqrt(sigma2_outer) * np.stack([g.ravel() for g in grids], axis=-1)
    log_weights = np.sum(np.log(np.stack(np.meshgrid(*([rule.weights] * outer_count), indexing="ij"), -1)), -1).ravel()

    # (combination, inner effect, cell)
    shifted = eta[None, :, :] + outer[:, None, :]
    obs = np.broadcast_to(y, shifted.shape)
    inner = _effect_block(data.family, obs, shifted, sigma2_inner)
    mode, curvature = find_mode(inner, np.zeros(shifted.shape[:2]))
    inner_terms = aghq_1d(inner, mode, curvature, n_nodes=n_nodes)
    return float(logsumexp(log_weights + np.sum(inner_terms, axis=1)))


def apply_conjectured_correction(
    beta0_r: float, beta0_c: float, slopes: ArrayLike, sigma2_u: float, sigma2_v: float
) -> tuple[float, NDArray, float]:
    """
    β₀ = (β₀^r + β₀^c) / [2{1 - 0.1(σ²_u + σ²_v)}] and β₁ = β₁^rc / {1 - 0.1(σ²_u + σ²_v)}.

    Returns (intercept, slopes, denominator).
    """
    denominator = 1 - 0.1 * (sigma2_u + sigma2_v)
    if denominator <= 0:
        raise CorrectionError(denominator)
    return (beta0_r + beta0_c) / (2 * denominator), np.asarray(slopes, dtype=np.float64) / denominator, denominator


def fit_logistic_experimental(data: Dataset, fit_config: FitConfig | None = None) -> FitResult:
    """Composite fit of the logistic model with quadrature expectations, then the conjectured correction."""
    if data.family.tag is not FamilyTag.LOGISTIC:
        raise UnsupportedFamilyError(family=data.family.name, operation="fit_logistic_experimental")
    fit_config = (fit_config or FitConfig.from_config(config)).model_copy(update={"method": Method.GVACL})

    result = fit(data, fit_config, kernel=logistic_cell_kernel(fit_config.quad_nodes))
    raw = result.raw_composite
    beta0, slopes, denominator = apply_conjectured_correction(
        raw.beta0_r, raw.beta0_c, raw.slopes, raw.sigma2_u, raw.sigma2_v
    )
    logger.info("conjectured correction applied with denominator %.4f", denominator)

    diagnostics = dict(result.diagnostics)
    diagnostics["correction_denominator"] = denominator
    diagnostics["uncorrected_beta0"] = (raw.beta0_r + raw.beta0_c) / 2
    diagnostics.update({f"uncorrected_beta{k + 1}": float(b) for k, b in enumerate(raw.slopes)})
    return replace(
        result,
        estimates=ModelParams(np.concatenate(([beta0], slopes)), raw.sigma2_u, raw.sigma2_v),
        experimental="conjectured correction",
        diagnostics=diagnostics,
    )
