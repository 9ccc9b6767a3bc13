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
Exponential-family kernels for crossed random effect models.

Every response density is written as exp[{yθ - b(θ)}/a(φ) + c(y, φ)] with a log link.
The functions below give the expectations of θ and b(θ) when the random effects
follow independent Gaussian variational laws, plus the exact log-density used by
the quadrature oracles.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import TYPE_CHECKING, Callable

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.special import gammaln

from crossed_gva.config import Config

if TYPE_CHECKING:
    from crossed_gva.domain import Dataset

config = Config()

# (y, s, lam) -> (value, d value / d s, d value / d lam), elementwise
CellKernel = Callable[
    [NDArray, NDArray, NDArray], tuple[NDArray, NDArray, NDArray]
]


class FamilyTag(str, enum.Enum):
    POISSON = "poisson"
    GAMMA = "gamma"
    LOGISTIC = "logistic"


@dataclass
class UnsupportedFamilyError(Exception):
    family: str
    operation: str

    def __str__(self) -> str:
        return f"{self.operation} is not available for the {self.family} family"


@dataclass
class OverflowGuardError(Exception):
    exponent: float
    block: str = "linear predictor"

    def __str__(self) -> str:
        return (
            f"exponent {self.exponent:.4g} exceeds the cap of {config.exp_cap:g} "
            f"(dominated by {self.block})"
        )


@dataclass
class ResponseDomainError(Exception):
    family: str
    detail: str

    def __str__(self) -> str:
        return f"invalid {self.family} response: {self.detail}"


@dataclass(frozen=True)
class Family:
    tag: FamilyTag
    alpha: float | None = None

    def __post_init__(self):
        if self.tag is FamilyTag.GAMMA:
            if self.alpha is None or not np.isfinite(self.alpha) or self.alpha <= 0:
                raise ValueError(f"Gamma family requires a shape alpha > 0, got {self.alpha!r}")
        elif self.alpha is not None:
            raise ValueError(f"{self.tag.value} family takes no shape parameter")

    @classmethod
    def poisson(cls) -> Family:
        return cls(FamilyTag.POISSON)

    @classmethod
    def gamma(cls, alpha: float) -> Family:
        return cls(FamilyTag.GAMMA, float(alpha))

    @classmethod
    def logistic(cls) -> Family:
        return cls(FamilyTag.LOGISTIC)

    @classmethod
    def parse(cls, name: str, alpha: float | None = None) -> Family:
        tag = FamilyTag(name.lower())
        return cls(tag, None if tag is not FamilyTag.GAMMA else alpha)

    @property
    def name(self) -> str:
        return self.tag.value

    @property
    def data_weight(self) -> float:
        """1/a(φ): α for Gamma, 1 otherwise."""
        return self.alpha if self.tag is FamilyTag.GAMMA else 1.0

    @property
    def has_closed_form(self) -> bool:
        return self.tag is not FamilyTag.LOGISTIC


def guarded_exp(x: ArrayLike, block: str = "linear predictor") -> NDArray:
    x = np.asarray(x, dtype=np.float64)
    peak = np.max(x) if x.size else -np.inf
    if not peak <= config.exp_cap:
        raise OverflowGuardError(exponent=float(peak), block=block)
    return np.exp(x)


def _require_closed_form(family: Family, operation: str) -> None:
    if not family.has_closed_form:
        raise UnsupportedFamilyError(family=family.name, operation=operation)


def _scalar_or_array(value: NDArray):
    return float(value) if np.ndim(value) == 0 else value


def e_theta_joint(family: Family, eta, mu_u, lam_u, mu_v, lam_v):
    _require_closed_form(family, "e_theta_joint")
    s = np.add(np.add(eta, mu_u), mu_v)
    if family.tag is FamilyTag.POISSON:
        return _scalar_or_array(np.asarray(s, dtype=np.float64))
    return _scalar_or_array(-guarded_exp(-s + np.add(lam_u, lam_v) / 2))


def e_btheta_joint(family: Family, eta, mu_u, lam_u, mu_v, lam_v):
    _require_closed_form(family, "e_btheta_joint")
    s = np.add(np.add(eta, mu_u), mu_v)
    if family.tag is FamilyTag.POISSON:
        return _scalar_or_array(guarded_exp(s + np.add(lam_u, lam_v) / 2))
    return _scalar_or_array(np.asarray(s, dtype=np.float64))


def e_theta_row(family: Family, eta, mu, lam):
    return e_theta_joint(family, eta, mu, lam, 0.0, 0.0)


def e_btheta_row(family: Family, eta, mu, lam):
    return e_btheta_joint(family, eta, mu, lam, 0.0, 0.0)


# the column composite has the same single-effect form as the row composite
e_theta_col = e_theta_row
e_btheta_col = e_btheta_row


def _poisson_kernel(y: NDArray, s: NDArray, lam: NDArray):
    mean = guarded_exp(s + lam / 2)
    return y * s - mean, y - mean, -0.5 * mean


def _gamma_kernel(alpha: float) -> CellKernel:
    def kernel(y: NDArray, s: NDArray, lam: NDArray):
        inv_mean = guarded_exp(-s + lam / 2)
        scaled = y * inv_mean
        return (
            alpha * (-scaled - s),
            alpha * (scaled - 1.0),
            -0.5 * alpha * scaled,
        )

    return kernel


def cell_kernel(family: Family) -> CellKernel:
    """
    Per-cell term w·[y·Eθ - E b(θ)] of a variational bound, with its derivatives.

    `s` is the variational mean of the linear predictor and `lam` its variance, so the
    joint expectation uses s = η + μ_u + μ_v, lam = λ_u + λ_v and the single-effect
    expectations use one effect only.
    """
    _require_closed_form(family, "cell_kernel")
    if family.tag is FamilyTag.POISSON:
        return _poisson_kernel
    return _gamma_kernel(family.data_weight)


def check_response(family: Family, y: ArrayLike) -> NDArray:
    y = np.asarray(y, dtype=np.float64)
    if not np.all(np.isfinite(y)):
        raise ResponseDomainError(family.name, "responses must be finite")
    if family.tag is FamilyTag.POISSON:
        if np.any(y < 0) or np.any(y != np.floor(y)):
            raise ResponseDomainError(family.name, "responses must be nonnegative integers")
    elif family.tag is FamilyTag.GAMMA:
        if np.any(y <= 0):
            raise ResponseDomainError(family.name, "responses must be strictly positive")
    elif np.any((y != 0) & (y != 1)):
        raise ResponseDomainError(family.name, "responses must be 0 or 1")
    return y


def log_normalizer(family: Family, y: ArrayLike) -> NDArray:
    """c(y, φ): the part of the log-density that does not involve θ."""
    y = check_response(family, y)
    if family.tag is FamilyTag.POISSON:
        return -gammaln(y + 1)
    if family.tag is FamilyTag.GAMMA:
        alpha = family.alpha
        return alpha * np.log(alpha) + (alpha - 1) * np.log(y) - gammaln(alpha)
    return np.zeros_like(y)


def log_density(family: Family, y, eta):
    """Exact conditional log-density of y given the linear predictor, constants included."""
    c = log_normalizer(family, y)
    y = np.asarray(y, dtype=np.float64)
    eta = np.asarray(eta, dtype=np.float64)
    if family.tag is FamilyTag.POISSON:
        value = y * eta - np.exp(eta) + c
    elif family.tag is FamilyTag.GAMMA:
        value = family.alpha * (-y * np.exp(-eta) - eta) + c
    else:
        value = y * eta - np.logaddexp(0.0, eta)
    return _scalar_or_array(value)


def constant_offset(data: Dataset, composite: bool = False) -> float:
    """
    Constants dropped by the variational bounds.

    Adding this to `full_elbo` (or to `composite_elbo` with composite=True) gives a
    quantity directly comparable with the exact (composite) log-likelihood.
    """
    response_terms = float(np.sum(log_normalizer(data.family, data.y)))
    if composite:
        response_terms *= 2
    return response_terms + (data.m + data.n) / 2
