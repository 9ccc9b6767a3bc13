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
Composite bound with the variational parameters profiled out.

For Poisson and Gamma responses the row block of the composite bound touches the
cells of row i only through two sums, so once Ψ^rc is fixed every (μ_ui, λ_ui) solves
its own two-dimensional concave problem, and the same holds for every column.
`CompositeProfile` solves all of them with vectorized damped Newton steps and returns
the bound at the inner optimum. Its gradient in Ψ^rc is the partial gradient there.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from crossed_gva.config import Config
from crossed_gva.domain import CompositeParams, Dataset, VariationalParams
from crossed_gva.family import FamilyTag, UnsupportedFamilyError, guarded_exp
from crossed_gva.services.elbo import (
    COLUMN_EFFECTS,
    FIXED_EFFECTS,
    LAMBDA_FLOOR,
    ROW_EFFECTS,
    CompositeGradient,
    penalty,
    penalty_grad,
)

config = Config()


@dataclass(frozen=True)
class EffectProblems:
    """
    Independent problems max over (μ, λ) of  a·μ - exp(log_k + sign·μ + λ/2) + ½log λ - (μ² + λ)/(2σ²),
    one per row (or per column), solved together.
    """

    a: NDArray
    log_k: NDArray
    sign: float
    sigma2: float
    block: str

    def _exponent(self, mu: NDArray, lam: NDArray) -> NDArray:
        return self.log_k + self.sign * mu + lam / 2

    def _value(self, mu: NDArray, lam: NDArray, e: NDArray) -> NDArray:
        return self.a * mu - e + 0.5 * np.log(lam) - (mu**2 + lam) / (2 * self.sigma2)

    def gradient(self, mu: NDArray, lam: NDArray, e: NDArray) -> tuple[NDArray, NDArray]:
        return self.a - self.sign * e - mu / self.sigma2, 0.5 * (1 / lam - 1 / self.sigma2 - e)

    def solve(
        self, mu: NDArray, lam: NDArray, tol: float = 1e-10, max_steps: int = 100, max_halvings: int = 60
    ) -> tuple[NDArray, NDArray, NDArray]:
        """Newton ascent from (mu, lam); returns the optimum and exp(exponent) there."""
        mu, lam = mu.astype(np.float64), np.maximum(lam, LAMBDA_FLOOR)
        # warm starts past the cap restart where the exponent is zero
        wild = ~(self._exponent(mu, lam) <= config.exp_cap)
        if wild.any():
            lam = np.where(wild, min(self.sigma2, 1.0), lam)
            mu = np.where(wild, -self.sign * (self.log_k + lam / 2), mu)
        e = guarded_exp(self._exponent(mu, lam), block=self.block)
        value = self._value(mu, lam, e)
        for _ in range(max_steps):
            g_mu, g_lam = self.gradient(mu, lam, e)
            scale = 1.0 + np.abs(self.a) + e
            if np.all(np.abs(g_mu) <= tol * scale) and np.all(np.abs(lam * g_lam) <= tol * scale):
                break

            h_mm = -e - 1 / self.sigma2
            h_ml = -0.5 * self.sign * e
            h_ll = -0.25 * e - 0.5 / lam**2
            det = h_mm * h_ll - h_ml**2
            d_mu = -(h_ll * g_mu - h_ml * g_lam) / det
            d_lam = -(h_mm * g_lam - h_ml * g_mu) / det

            # λ stays positive: never more than 90% of the way to zero
            step = np.where(d_lam < 0, np.minimum(1.0, -0.9 * lam / np.where(d_lam < 0, d_lam, -1.0)), 1.0)
            pending = np.ones(mu.shape, dtype=bool)
            for _ in range(max_halvings):
                trial_mu = mu + step * d_mu
                trial_lam = np.maximum(lam + step * d_lam, LAMBDA_FLOOR)
                exponent = self._exponent(trial_mu, trial_lam)
                finite = exponent <= config.exp_cap
                trial_e = np.exp(np.where(finite, exponent, 0.0))
                trial_value = np.where(finite, self._value(trial_mu, trial_lam, trial_e), -np.inf)
                accept = pending & (trial_value >= value - 1e-13 * (1.0 + np.abs(value)))
                mu = np.where(accept, trial_mu, mu)
                lam = np.where(accept, trial_lam, lam)
                e = np.where(accept, trial_e, e)
                value = np.where(accept, trial_value, value)
                pending &= ~accept
                if not pending.any():
                    break
                step = np.where(pending, step / 2, step)
            if pending.all():
                break
        return mu, lam, e


@dataclass
class CompositeProfile:
    """
    Composite bound as a function of Ψ^rc alone.

    The cell term is w·[lin·s - mult·exp(sign·s + λ/2)] with s = β₀ + x'β + μ: Poisson has
    lin = y, mult = 1, sign = +1 and Gamma has lin = -1, mult = y, sign = -1. `xi` holds the
    inner optimum of the last evaluation and warm-starts the next one.
    """

    data: Dataset
    xi: VariationalParams
    tol: float = 1e-10
    max_steps: int = 100
    evaluations: int = field(default=0, init=False)

    def __post_init__(self):
        family = self.data.family
        if not family.has_closed_form:
            raise UnsupportedFamilyError(family=family.name, operation="the profiled composite fit")
        self.xi.check_grid(self.data)
        y = self.data.y
        poisson = family.tag is FamilyTag.POISSON
        self.sign = 1.0 if poisson else -1.0
        self.weight = family.data_weight
        self.lin = y if poisson else -np.ones_like(y)
        self.mult = np.ones_like(y) if poisson else y
        self.lin_total = self.weight * float(np.sum(self.lin))
        self.lin_rows = self.weight * self.lin.sum(axis=1)
        self.lin_cols = self.weight * self.lin.sum(axis=0)
        self.lin_slopes = 2 * self.weight * np.einsum("ij,ijk->k", self.lin, self.data.x)

    def _problems(self, sums: NDArray, beta0: float, sigma2: float, a: NDArray, block: str) -> EffectProblems:
        with np.errstate(divide="ignore"):
            log_k = np.log(self.weight * sums) + self.sign * beta0
        return EffectProblems(a=a, log_k=log_k, sign=self.sign, sigma2=sigma2, block=block)

    def evaluate(self, psi_rc: CompositeParams) -> tuple[float, CompositeGradient]:
        """Profiled bound and the composite gradient at (Ψ^rc, ξ*(Ψ^rc)); updates `xi`."""
        self.evaluations += 1
        slope_part = self.data.linear_predictor(0.0, psi_rc.slopes)
        scaled = self.mult * guarded_exp(self.sign * slope_part, block=FIXED_EFFECTS)
        row_sums, col_sums = scaled.sum(axis=1), scaled.sum(axis=0)

        rows = self._problems(row_sums, psi_rc.beta0_r, psi_rc.sigma2_u, self.lin_rows, ROW_EFFECTS)
        cols = self._problems(col_sums, psi_rc.beta0_c, psi_rc.sigma2_v, self.lin_cols, COLUMN_EFFECTS)
        mu_u, lam_u, e_u = rows.solve(self.xi.mu_u, self.xi.lam_u, self.tol, self.max_steps)
        mu_v, lam_v, e_v = cols.solve(self.xi.mu_v, self.xi.lam_v, self.tol, self.max_steps)
        self.xi = VariationalParams(mu_u=mu_u, lam_u=lam_u, mu_v=mu_v, lam_v=lam_v)

        value = (
            self.weight * 2 * float(np.sum(self.lin * slope_part))
            + self.lin_total * (psi_rc.beta0_r + psi_rc.beta0_c)
            + float(np.sum(self.lin_rows * mu_u - e_u))
            + float(np.sum(self.lin_cols * mu_v - e_v))
            + penalty(mu_u, lam_u, psi_rc.sigma2_u)
            + penalty(mu_v, lam_v, psi_rc.sigma2_v)
        )

        with np.errstate(divide="ignore", invalid="ignore"):
            rate_u = np.where(row_sums > 0, e_u / row_sums, 0.0)
            rate_v = np.where(col_sums > 0, e_v / col_sums, 0.0)
        cell_weight = (rate_u[:, None] + rate_v[None, :]) * scaled
        g_mu_u, g_lam_u = rows.gradient(mu_u, lam_u, e_u)
        g_mu_v, g_lam_v = cols.gradient(mu_v, lam_v, e_v)
        return value, CompositeGradient(
            beta0_r=self.lin_total - self.sign * float(np.sum(e_u)),
            beta0_c=self.lin_total - self.sign * float(np.sum(e_v)),
            slopes=self.lin_slopes - self.sign * np.einsum("ij,ijk->k", cell_weight, self.data.x),
            sigma2_u=penalty_grad(mu_u, lam_u, psi_rc.sigma2_u)[0],
            sigma2_v=penalty_grad(mu_v, lam_v, psi_rc.sigma2_v)[0],
            mu_u=g_mu_u,
            lam_u=g_lam_u,
            mu_v=g_mu_v,
            lam_v=g_lam_v,
        )
