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
Gaussian variational lower bounds for crossed random effect models.

`full_elbo` is the bound on the full marginal log-likelihood, with one cell term per
(i, j) using both effects. `composite_elbo` is the bound on the row-column composite
log-likelihood: a row block that ignores the column effects plus a column block that
ignores the row effects, sharing the slopes and the variational parameters. Both drop
the same constants; `crossed_gva.family.constant_offset` adds them back.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from numpy.typing import NDArray

from crossed_gva.domain import (
    CompositeParams,
    Dataset,
    DimensionMismatchError,
    ModelParams,
    VariationalParams,
)
from crossed_gva.family import CellKernel, FamilyTag, OverflowGuardError, cell_kernel

FIXED_EFFECTS = "fixed effects"
ROW_EFFECTS = "row effects"
COLUMN_EFFECTS = "column effects"
VARIANCE_COMPONENTS = "variance components"

LAMBDA_FLOOR = 1e-12


@dataclass(frozen=True)
class FullElboTerms:
    data: float
    row_penalty: float
    col_penalty: float

    @property
    def total(self) -> float:
        return self.data + self.row_penalty + self.col_penalty


@dataclass(frozen=True)
class CompositeElboTerms:
    row_data: float
    col_data: float
    row_penalty: float
    col_penalty: float

    @property
    def row_block(self) -> float:
        return self.row_data + self.row_penalty

    @property
    def col_block(self) -> float:
        return self.col_data + self.col_penalty

    @property
    def total(self) -> float:
        return self.row_block + self.col_block


@dataclass(frozen=True)
class FullGradient:
    """Natural-scale gradient of `full_elbo`."""

    beta: NDArray
    sigma2_u: float
    sigma2_v: float
    mu_u: NDArray
    lam_u: NDArray
    mu_v: NDArray
    lam_v: NDArray

    def transformed(self, psi: ModelParams, xi: VariationalParams) -> FullGradient:
        """Derivatives with respect to log σ² and log λ; other coordinates unchanged."""
        return FullGradient(
            beta=self.beta,
            sigma2_u=self.sigma2_u * psi.sigma2_u,
            sigma2_v=self.sigma2_v * psi.sigma2_v,
            mu_u=self.mu_u,
            lam_u=self.lam_u * xi.lam_u,
            mu_v=self.mu_v,
            lam_v=self.lam_v * xi.lam_v,
        )

    def max_norm(self) -> float:
        return float(
            max(
                np.max(np.abs(self.beta)),
                abs(self.sigma2_u),
                abs(self.sigma2_v),
                *(np.max(np.abs(a), initial=0.0) for a in (self.mu_u, self.lam_u, self.mu_v, self.lam_v)),
            )
        )


@dataclass(frozen=True)
class CompositeGradient:
    """Natural-scale gradient of `composite_elbo`."""

    beta0_r: float
    beta0_c: float
    slopes: NDArray
    sigma2_u: float
    sigma2_v: float
    mu_u: NDArray
    lam_u: NDArray
    mu_v: NDArray
    lam_v: NDArray

    def transformed(self, psi_rc: CompositeParams, xi: VariationalParams) -> CompositeGradient:
        return CompositeGradient(
            beta0_r=self.beta0_r,
            beta0_c=self.beta0_c,
            slopes=self.slopes,
            sigma2_u=self.sigma2_u * psi_rc.sigma2_u,
            sigma2_v=self.sigma2_v * psi_rc.sigma2_v,
            mu_u=self.mu_u,
            lam_u=self.lam_u * xi.lam_u,
            mu_v=self.mu_v,
            lam_v=self.lam_v * xi.lam_v,
        )

    def max_norm(self) -> float:
        return float(
            max(
                abs(self.beta0_r),
                abs(self.beta0_c),
                np.max(np.abs(self.slopes), initial=0.0),
                abs(self.sigma2_u),
                abs(self.sigma2_v),
                *(np.max(np.abs(a), initial=0.0) for a in (self.mu_u, self.lam_u, self.mu_v, self.lam_v)),
            )
        )


def _check_dimensions(data: Dataset, p: int, xi: VariationalParams) -> None:
    if p != data.p:
        raise DimensionMismatchError(f"parameters carry {p} slopes, data has {data.p} covariates")
    xi.check_grid(data)


def penalty(mu: NDArray, lam: NDArray, sigma2: float) -> float:
    return 0.5 * float(np.sum(np.log(lam / sigma2) - (mu**2 + lam) / sigma2))


def penalty_grad(mu: NDArray, lam: NDArray, sigma2: float) -> tuple[float, NDArray, NDArray]:
    d_sigma2 = float(np.sum(-0.5 / sigma2 + (mu**2 + lam) / (2 * sigma2**2)))
    return d_sigma2, -mu / sigma2, 0.5 * (1 / lam - 1 / sigma2)


def _attribute_overflow(
    data: Dataset,
    error: OverflowGuardError,
    eta: NDArray,
    row: tuple[NDArray, NDArray] | None,
    col: tuple[NDArray, NDArray] | None,
) -> OverflowGuardError:
    """Name the block that contributes most to the largest exponent of the cell sum."""
    sign = 1.0 if data.family.tag is FamilyTag.POISSON else -1.0
    zeros = np.zeros((data.m, data.n))
    contributions = {FIXED_EFFECTS: sign * eta}
    contributions[ROW_EFFECTS] = zeros if row is None else zeros + (sign * row[0] + row[1] / 2)[:, None]
    contributions[COLUMN_EFFECTS] = zeros if col is None else zeros + (sign * col[0] + col[1] / 2)[None, :]
    exponent = sum(contributions.values())
    cell = np.unravel_index(np.argmax(exponent), exponent.shape)
    block = max(contributions, key=lambda name: contributions[name][cell])
    return OverflowGuardError(exponent=error.exponent, block=block)


def _full_cells(psi: ModelParams, xi: VariationalParams, data: Dataset, kernel: CellKernel | None):
    _check_dimensions(data, psi.p, xi)
    kernel = kernel or cell_kernel(data.family)
    eta = data.linear_predictor(psi.beta[0], psi.beta[1:])
    s = eta + xi.mu_u[:, None] + xi.mu_v[None, :]
    lam = xi.lam_u[:, None] + xi.lam_v[None, :]
    try:
        return kernel(data.y, s, lam)
    except OverflowGuardError as e:
        raise _attribute_overflow(data, e, eta, (xi.mu_u, xi.lam_u), (xi.mu_v, xi.lam_v)) from e


def _composite_cells(psi_rc: CompositeParams, xi: VariationalParams, data: Dataset, kernel: CellKernel | None):
    _check_dimensions(data, psi_rc.p, xi)
    kernel = kernel or cell_kernel(data.family)
    slope_part = data.linear_predictor(0.0, psi_rc.slopes)
    eta_r = psi_rc.beta0_r + slope_part
    eta_c = psi_rc.beta0_c + slope_part
    shape = data.y.shape
    try:
        row = kernel(data.y, eta_r + xi.mu_u[:, None], np.broadcast_to(xi.lam_u[:, None], shape))
    except OverflowGuardError as e:
        raise _attribute_overflow(data, e, eta_r, (xi.mu_u, xi.lam_u), None) from e
    try:
        col = kernel(data.y, eta_c + xi.mu_v[None, :], np.broadcast_to(xi.lam_v[None, :], shape))
    except OverflowGuardError as e:
        raise _attribute_overflow(data, e, eta_c, None, (xi.mu_v, xi.lam_v)) from e
    return row, col


def full_elbo_terms(
    psi: ModelParams, xi: VariationalParams, data: Dataset, kernel: CellKernel | None = None
) -> FullElboTerms:
    value, _, _ = _full_cells(psi, xi, data, kernel)
    return FullElboTerms(
        data=float(np.sum(value)),
        row_penalty=penalty(xi.mu_u, xi.lam_u, psi.sigma2_u),
        col_penalty=penalty(xi.mu_v, xi.lam_v, psi.sigma2_v),
    )


def full_elbo(psi: ModelParams, xi: VariationalParams, data: Dataset, kernel: CellKernel | None = None) -> float:
    """
    Σ_ij w[y Eθ - E b(θ)] + ½Σ_i[log(λ_ui/σ²_u) - (μ²_ui + λ_ui)/σ²_u] + (same over columns).

    w is the family's data weight (α for Gamma, 1 otherwise).
    """
    return full_elbo_terms(psi, xi, data, kernel).total


def full_elbo_grad(
    psi: ModelParams, xi: VariationalParams, data: Dataset, kernel: CellKernel | None = None
) -> FullGradient:
    return full_elbo_and_grad(psi, xi, data, kernel)[1]


def full_elbo_and_grad(
    psi: ModelParams, xi: VariationalParams, data: Dataset, kernel: CellKernel | None = None
) -> tuple[float, FullGradient]:
    """Value and gradient from a single pass over the cells."""
    value, ds, dlam = _full_cells(psi, xi, data, kernel)
    d_s2u, d_mu_u, d_lam_u = penalty_grad(xi.mu_u, xi.lam_u, psi.sigma2_u)
    d_s2v, d_mu_v, d_lam_v = penalty_grad(xi.mu_v, xi.lam_v, psi.sigma2_v)
    total = float(np.sum(value)) + penalty(xi.mu_u, xi.lam_u, psi.sigma2_u) + penalty(xi.mu_v, xi.lam_v, psi.sigma2_v)
    beta = np.concatenate(([np.sum(ds)], np.einsum("ij,ijk->k", ds, data.x)))
    return total, FullGradient(
        beta=beta,
        sigma2_u=d_s2u,
        sigma2_v=d_s2v,
        mu_u=ds.sum(axis=1) + d_mu_u,
        lam_u=dlam.sum(axis=1) + d_lam_u,
        mu_v=ds.sum(axis=0) + d_mu_v,
        lam_v=dlam.sum(axis=0) + d_lam_v,
    )


def composite_elbo_terms(
    psi_rc: CompositeParams, xi: VariationalParams, data: Dataset, kernel: CellKernel | None = None
) -> CompositeElboTerms:
    (row_value, _, _), (col_value, _, _) = _composite_cells(psi_rc, xi, data, kernel)
    return CompositeElboTerms(
        row_data=float(np.sum(row_value)),
        col_data=float(np.sum(col_value)),
        row_penalty=penalty(xi.mu_u, xi.lam_u, psi_rc.sigma2_u),
        col_penalty=penalty(xi.mu_v, xi.lam_v, psi_rc.sigma2_v),
    )


def composite_elbo(
    psi_rc: CompositeParams, xi: VariationalParams, data: Dataset, kernel: CellKernel | None = None
) -> float:
    """
    Row block (β₀^r, slopes, μ_u, λ_u) plus column block (β₀^c, slopes, μ_v, λ_v), each
    with its own penalty sum. Only m + n one-dimensional expectations are involved.
    """
    return composite_elbo_terms(psi_rc, xi, data, kernel).total


def composite_elbo_grad(
    psi_rc: CompositeParams, xi: VariationalParams, data: Dataset, kernel: CellKernel | None = None
) -> CompositeGradient:
    return composite_elbo_and_grad(psi_rc, xi, data, kernel)[1]


def composite_elbo_and_grad(
    psi_rc: CompositeParams, xi: VariationalParams, data: Dataset, kernel: CellKernel | None = None
) -> tuple[float, CompositeGradient]:
    (value_r, ds_r, dlam_r), (value_c, ds_c, dlam_c) = _composite_cells(psi_rc, xi, data, kernel)
    d_s2u, d_mu_u, d_lam_u = penalty_grad(xi.mu_u, xi.lam_u, psi_rc.sigma2_u)
    d_s2v, d_mu_v, d_lam_v = penalty_grad(xi.mu_v, xi.lam_v, psi_rc.sigma2_v)
    total = (
        float(np.sum(value_r))
        + float(np.sum(value_c))
        + penalty(xi.mu_u, xi.lam_u, psi_rc.sigma2_u)
        + penalty(xi.mu_v, xi.lam_v, psi_rc.sigma2_v)
    )
    return total, CompositeGradient(
        beta0_r=float(np.sum(ds_r)),
        beta0_c=float(np.sum(ds_c)),
        slopes=np.einsum("ij,ijk->k", ds_r, data.x) + np.einsum("ij,ijk->k", ds_c, data.x),
        sigma2_u=d_s2u,
        sigma2_v=d_s2v,
        mu_u=ds_r.sum(axis=1) + d_mu_u,
        lam_u=dlam_r.sum(axis=1) + d_lam_u,
        mu_v=ds_c.sum(axis=0) + d_mu_v,
        lam_v=dlam_c.sum(axis=0) + d_lam_v,
    )


@dataclass(frozen=True)
class ParameterLayout:
    """
    Flat transformed-scale vector for (Ψ or Ψ^rc, ξ).

    Full order:      β (p+1), log σ²_u, log σ²_v, μ_u, log λ_u, μ_v, log λ_v
    Composite order: β₀^r, β₀^c, slopes (p), log σ²_u, log σ²_v, μ_u, log λ_u, μ_v, log λ_v
    """

    composite: bool
    m: int
    n: int
    p: int

    @classmethod
    def for_data(cls, data: Dataset, composite: bool) -> ParameterLayout:
        return cls(composite=composite, m=data.m, n=data.n, p=data.p)

    @cached_property
    def slices(self) -> dict[str, slice]:
        sizes = [("beta", self.p + (2 if self.composite else 1)), ("log_sigma2", 2)]
        sizes += [("mu_u", self.m), ("log_lam_u", self.m), ("mu_v", self.n), ("log_lam_v", self.n)]
        slices, start = {}, 0
        for name, size in sizes:
            slices[name] = slice(start, start + size)
            start += size
        return slices

    @property
    def size(self) -> int:
        return self.slices["log_lam_v"].stop

    @property
    def psi_size(self) -> int:
        """Number of leading Ψ (or Ψ^rc) coordinates."""
        return self.slices["mu_u"].start

    def pack(self, params: ModelParams | CompositeParams, xi: VariationalParams) -> NDArray:
        if self.composite:
            beta = np.concatenate(([params.beta0_r, params.beta0_c], params.slopes))
        else:
            beta = params.beta
        return np.concatenate(
            (
                beta,
                np.log([params.sigma2_u, params.sigma2_v]),
                xi.mu_u,
                np.log(xi.lam_u),
                xi.mu_v,
                np.log(xi.lam_v),
            )
        )

    def unpack(self, vector: NDArray) -> tuple[ModelParams | CompositeParams, VariationalParams]:
        s = self.slices
        beta = vector[s["beta"]]
        sigma2_u, sigma2_v = np.exp(vector[s["log_sigma2"]])
        if self.composite:
            params = CompositeParams(beta[0], beta[1], beta[2:], sigma2_u, sigma2_v)
        else:
            params = ModelParams(beta, sigma2_u, sigma2_v)
        xi = VariationalParams(
            mu_u=vector[s["mu_u"]],
            lam_u=np.exp(vector[s["log_lam_u"]]),
            mu_v=vector[s["mu_v"]],
            lam_v=np.exp(vector[s["log_lam_v"]]),
        )
        return params, xi

    def pack_gradient(
        self, grad: FullGradient | CompositeGradient, params: ModelParams | CompositeParams, xi: VariationalParams
    ) -> NDArray:
        g = grad.transformed(params, xi)
        if self.composite:
            beta = np.concatenate(([g.beta0_r, g.beta0_c], g.slopes))
        else:
            beta = g.beta
        return np.concatenate((beta, [g.sigma2_u, g.sigma2_v], g.mu_u, g.lam_u, g.mu_v, g.lam_v))

    def bounds(self, sigma2_floor: float, ceiling: float) -> tuple[NDArray, NDArray]:
        lower = np.full(self.size, -np.inf)
        upper = np.full(self.size, np.inf)
        s = self.slices
        lower[s["log_sigma2"]] = np.log(sigma2_floor)
        upper[s["log_sigma2"]] = np.log(ceiling)
        for name in ("log_lam_u", "log_lam_v"):
            lower[s[name]] = np.log(LAMBDA_FLOOR)
            upper[s[name]] = np.log(ceiling)
        return lower, upper

    def variational_mask(self) -> NDArray:
        """True on ξ coordinates, False on Ψ coordinates."""
        mask = np.zeros(self.size, dtype=bool)
        mask[self.psi_size :] = True
        return mask

    def block_of(self, index: int) -> str:
        s = self.slices
        if index < s["log_sigma2"].start:
            return FIXED_EFFECTS
        if index < s["mu_u"].start:
            return VARIANCE_COMPONENTS
        if index < s["mu_v"].start:
            return ROW_EFFECTS
        return COLUMN_EFFECTS

    def names(self) -> list[str]:
        if self.composite:
            beta = ["beta0_r", "beta0_c"] + [f"beta{k + 1}" for k in range(self.p)]
        else:
            beta = [f"beta{k}" for k in range(self.p + 1)]
        return (
            beta
            + ["log_sigma2_u", "log_sigma2_v"]
            + [f"mu_u[{i}]" for i in range(self.m)]
            + [f"log_lam_u[{i}]" for i in range(self.m)]
            + [f"mu_v[{j}]" for j in range(self.n)]
            + [f"log_lam_v[{j}]" for j in range(self.n)]
        )
