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
Intercept recovery and plug-in asymptotic standard errors for the composite estimator.

φ, φ₁ and φ₂ in the Poisson slope variance are the covariate moment-generating function
E exp(tX) and its first two derivatives, supplied by an `MgfSpec`.
"""

from __future__ import annotations

import abc
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any

import numpy as np
from numpy.typing import ArrayLike, NDArray
from pydantic import PositiveFloat, PositiveInt, validate_call

from crossed_gva.family import FamilyTag

if TYPE_CHECKING:
    from crossed_gva.domain import Dataset
    from crossed_gva.services.optimizer import FitResult

_ONES3 = np.ones(3)
_ONES2 = np.ones(2)


@dataclass
class SingularMgfError(Exception):
    law: str

    def __str__(self) -> str:
        return f"φ₂φ - φ₁² is not positive for the covariate law {self.law}"


@dataclass(frozen=True)
class SigmaSE:
    se_of_variance: float
    se_of_sd: float


@dataclass(frozen=True)
class AsymptoticSE:
    se_beta0: float
    se_beta1: float | None
    se_sigma_u: float
    se_sigma_v: float
    basis: dict[str, Any] = field(default_factory=dict)


@validate_call
def recover_intercept(beta0_r: float, beta0_c: float, sigma2_u: PositiveFloat, sigma2_v: PositiveFloat) -> float:
    """Invert β₀^r = β₀ + σ²_v/2 and β₀^c = β₀ + σ²_u/2 by averaging."""
    return (beta0_r + beta0_c - sigma2_u / 2 - sigma2_v / 2) / 2


def shifted_intercepts(beta0: float, sigma2_u: float, sigma2_v: float) -> tuple[float, float]:
    """Row and column composite intercepts implied by a full-model intercept."""
    return beta0 + sigma2_v / 2, beta0 + sigma2_u / 2


@validate_call
def gamma1(sigma2_u: PositiveFloat) -> NDArray:
    s = sigma2_u
    return (
        np.array(
            [
                [2 * np.expm1(s), 2 * s, -(s**2)],
                [2 * s, 2 * s, 0.0],
                [-(s**2), 0.0, s**2],
            ]
        )
        / 8
    )


@validate_call
def gamma2(sigma2_v: PositiveFloat) -> NDArray:
    # same display with the column variance
    return gamma1(sigma2_v)


@validate_call
def gamma3(sigma2_u: PositiveFloat, sigma2_v: PositiveFloat) -> NDArray:
    eu, ev = np.expm1(sigma2_u), np.expm1(sigma2_v)
    return (
        np.array(
            [
                [np.exp(sigma2_u) * ev, eu * ev],
                [eu * ev, np.exp(sigma2_v) * eu],
            ]
        )
        / 4
    )


@validate_call
def sigma_tilde(alpha: PositiveFloat, sigma2_u: PositiveFloat, sigma2_v: PositiveFloat) -> NDArray:
    return np.array(
        [
            [alpha * np.expm1(sigma2_v) + np.exp(sigma2_v), 1.0],
            [1.0, alpha * np.expm1(sigma2_u) + np.exp(sigma2_u)],
        ]
    ) / (4 * alpha)


@validate_call
def se_beta0(sigma2_u: PositiveFloat, sigma2_v: PositiveFloat, m: PositiveInt, n: PositiveInt) -> float:
    return float(np.sqrt(_ONES3 @ gamma1(sigma2_u) @ _ONES3 / m + _ONES3 @ gamma2(sigma2_v) @ _ONES3 / n))


@validate_call
def se_sigma(sigma2: PositiveFloat, count: PositiveInt) -> SigmaSE:
    se_var = np.sqrt(2) * sigma2 / np.sqrt(count)
    return SigmaSE(se_of_variance=float(se_var), se_of_sd=float(se_var / (2 * np.sqrt(sigma2))))


@validate_call
def se_beta1_gamma(
    alpha: PositiveFloat, sigma2_u: PositiveFloat, sigma2_v: PositiveFloat, m: PositiveInt, n: PositiveInt
) -> float:
    return float(np.sqrt(_ONES2 @ sigma_tilde(alpha, sigma2_u, sigma2_v) @ _ONES2 / (m * n)))


class MgfSpec(abc.ABC):
    """Moment-generating function of the covariate law and its first two derivatives."""

    law: str

    @abc.abstractmethod
    def phi(self, t: float) -> float: ...

    @abc.abstractmethod
    def phi1(self, t: float) -> float: ...

    @abc.abstractmethod
    def phi2(self, t: float) -> float: ...

    def tau1(self, beta1: float) -> float:
        phi, phi1, phi2 = self.phi(beta1), self.phi1(beta1), self.phi2(beta1)
        denominator = phi2 * phi - phi1**2
        if not denominator > 1e-12 * abs(phi2 * phi):
            raise SingularMgfError(self.law)
        return phi / denominator

    def tau2(self, beta1: float) -> float:
        phi, phi1 = self.phi(beta1), self.phi1(beta1)
        double = 2 * beta1
        return self.phi2(double) - 2 * phi1 * self.phi1(double) / phi + phi1**2 * self.phi(double) / phi**2


@dataclass(frozen=True)
class NormalMgf(MgfSpec):
    mean: float = 0.0
    sd: float = 1.0

    @property
    def law(self) -> str:
        return f"Normal({self.mean:g}, {self.sd:g})"

    def phi(self, t: float) -> float:
        return float(np.exp(self.mean * t + self.sd**2 * t**2 / 2))

    def phi1(self, t: float) -> float:
        return (self.mean + self.sd**2 * t) * self.phi(t)

    def phi2(self, t: float) -> float:
        return ((self.mean + self.sd**2 * t) ** 2 + self.sd**2) * self.phi(t)


class EmpiricalMgf(MgfSpec):
    law = "empirical"

    def __init__(self, values: ArrayLike):
        self.values = np.asarray(values, dtype=np.float64).ravel()
        if self.values.size == 0 or not np.all(np.isfinite(self.values)):
            raise ValueError("the empirical MGF needs a non-empty set of finite covariate values")

    def _moment(self, t: float, power: int) -> float:
        return float(np.mean(self.values**power * np.exp(t * self.values)))

    def phi(self, t: float) -> float:
        return self._moment(t, 0)

    def phi1(self, t: float) -> float:
        return self._moment(t, 1)

    def phi2(self, t: float) -> float:
        return self._moment(t, 2)


def se_beta1_poisson(
    beta0: float,
    beta1: float,
    sigma2_u: float,
    sigma2_v: float,
    m: int,
    n: int,
    covariate_mgf: MgfSpec,
) -> float:
    """sqrt([exp(-β₀ - σ²_u/2 - σ²_v/2)·τ₁ + τ₁²τ₂·1ᵀΓ₃1] / (mn))."""
    tau1 = covariate_mgf.tau1(beta1)
    tau2 = covariate_mgf.tau2(beta1)
    variance = np.exp(-beta0 - sigma2_u / 2 - sigma2_v / 2) * tau1 + tau1**2 * tau2 * (
        _ONES2 @ gamma3(sigma2_u, sigma2_v) @ _ONES2
    )
    return float(np.sqrt(variance / (m * n)))


def asymptotic_se(result: FitResult, data: Dataset) -> AsymptoticSE | None:
    """Plug-in SEs at the estimates of a composite fit; None for full-GVA and logistic fits."""
    if not result.method.composite or result.family.tag is FamilyTag.LOGISTIC:
        return None

    est = result.estimates
    m, n = data.m, data.n
    basis: dict[str, Any] = {"sigma2_u": est.sigma2_u, "sigma2_v": est.sigma2_v, "m": m, "n": n}
    se_b1 = None
    if data.p != 1:
        basis["beta1"] = f"slope SE needs exactly one covariate, data has {data.p}"
    elif result.family.tag is FamilyTag.GAMMA:
        se_b1 = se_beta1_gamma(result.family.alpha, est.sigma2_u, est.sigma2_v, m, n)
        basis["beta1"] = f"sigma_tilde with alpha={result.family.alpha:g}"
    else:
        mgf = EmpiricalMgf(data.x[:, :, 0])
        try:
            se_b1 = se_beta1_poisson(est.beta[0], est.beta[1], est.sigma2_u, est.sigma2_v, m, n, mgf)
            basis["beta1"] = f"{mgf.law} covariate MGF"
        except SingularMgfError as e:
            basis["beta1"] = str(e)

    return AsymptoticSE(
        se_beta0=se_beta0(est.sigma2_u, est.sigma2_v, m, n),
        se_beta1=se_b1,
        se_sigma_u=se_sigma(est.sigma2_u, m).se_of_sd,
        se_sigma_v=se_sigma(est.sigma2_v, n).se_of_sd,
        basis=basis,
    )
