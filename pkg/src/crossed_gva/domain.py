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

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray

from crossed_gva.family import Family, check_response


@dataclass
class DimensionMismatchError(Exception):
    detail: str

    def __str__(self) -> str:
        return f"dimension mismatch: {self.detail}"


@dataclass
class InvalidParameterError(Exception):
    detail: str

    def __str__(self) -> str:
        return self.detail


def _frozen(values: ArrayLike, ndim: int, name: str) -> NDArray:
    array = np.array(values, dtype=np.float64)
    if array.ndim != ndim:
        raise DimensionMismatchError(f"{name} must be {ndim}-dimensional, got shape {array.shape}")
    array.flags.writeable = False
    return array


def _positive(value: float, name: str) -> float:
    value = float(value)
    if not np.isfinite(value) or value <= 0:
        raise InvalidParameterError(f"{name} must be a positive finite number, got {value!r}")
    return value


@dataclass(frozen=True)
class Dataset:
    """Complete m×n response grid with an (m, n, p) covariate array (intercept excluded)."""

    y: NDArray
    x: NDArray
    family: Family

    def __post_init__(self):
        y = _frozen(self.y, 2, "y")
        x = np.asarray(self.x, dtype=np.float64)
        if x.ndim == 2:
            x = x[:, :, None]
        x = _frozen(x, 3, "x")
        if x.shape[:2] != y.shape:
            raise DimensionMismatchError(f"covariates have grid shape {x.shape[:2]}, responses {y.shape}")
        if y.shape[0] < 1 or y.shape[1] < 1:
            raise DimensionMismatchError("the response grid must have at least one row and one column")
        if not np.all(np.isfinite(x)):
            raise InvalidParameterError("covariates must be finite")
        check_response(self.family, y)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)

    @property
    def m(self) -> int:
        return self.y.shape[0]

    @property
    def n(self) -> int:
        return self.y.shape[1]

    @property
    def p(self) -> int:
        return self.x.shape[2]

    def linear_predictor(self, intercept: float, slopes: ArrayLike) -> NDArray:
        slopes = np.asarray(slopes, dtype=np.float64)
        if slopes.shape != (self.p,):
            raise DimensionMismatchError(f"expected {self.p} slopes, got {slopes.shape}")
        return intercept + self.x @ slopes

    def permuted(self, rows: ArrayLike | None = None, cols: ArrayLike | None = None) -> Dataset:
        rows = np.arange(self.m) if rows is None else np.asarray(rows)
        cols = np.arange(self.n) if cols is None else np.asarray(cols)
        return Dataset(
            y=self.y[np.ix_(rows, cols)],
            x=self.x[np.ix_(rows, cols)],
            family=self.family,
        )

    def scaled(self, scale: float) -> Dataset:
        scale = _positive(scale, "scale")
        return Dataset(y=self.y / scale, x=self.x / scale, family=self.family)


@dataclass(frozen=True)
class ModelParams:
    """Ψ = (β, σ²_u, σ²_v) with β₀ first."""

    beta: NDArray
    sigma2_u: float
    sigma2_v: float

    def __post_init__(self):
        beta = _frozen(self.beta, 1, "beta")
        if beta.size < 1:
            raise DimensionMismatchError("beta needs at least the intercept")
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "sigma2_u", _positive(self.sigma2_u, "sigma2_u"))
        object.__setattr__(self, "sigma2_v", _positive(self.sigma2_v, "sigma2_v"))

    @property
    def p(self) -> int:
        return self.beta.size - 1

    @property
    def sigma_u(self) -> float:
        return float(np.sqrt(self.sigma2_u))

    @property
    def sigma_v(self) -> float:
        return float(np.sqrt(self.sigma2_v))


@dataclass(frozen=True)
class CompositeParams:
    """Ψ^rc: separate row/column intercepts, shared slopes and variance components."""

    beta0_r: float
    beta0_c: float
    slopes: NDArray
    sigma2_u: float
    sigma2_v: float

    def __post_init__(self):
        object.__setattr__(self, "beta0_r", float(self.beta0_r))
        object.__setattr__(self, "beta0_c", float(self.beta0_c))
        object.__setattr__(self, "slopes", _frozen(self.slopes, 1, "slopes"))
        object.__setattr__(self, "sigma2_u", _positive(self.sigma2_u, "sigma2_u"))
        object.__setattr__(self, "sigma2_v", _positive(self.sigma2_v, "sigma2_v"))

    @property
    def p(self) -> int:
        return self.slopes.size


@dataclass(frozen=True)
class VariationalParams:
    """ξ: Gaussian means and variances for every row and column effect."""

    mu_u: NDArray
    lam_u: NDArray
    mu_v: NDArray
    lam_v: NDArray

    def __post_init__(self):
        for name in ("mu_u", "lam_u", "mu_v", "lam_v"):
            object.__setattr__(self, name, _frozen(getattr(self, name), 1, name))
        if self.mu_u.shape != self.lam_u.shape or self.mu_v.shape != self.lam_v.shape:
            raise DimensionMismatchError("means and variances must have matching lengths")
        if not (np.all(self.lam_u > 0) and np.all(self.lam_v > 0)):
            raise InvalidParameterError("variational variances must be strictly positive")

    @property
    def m(self) -> int:
        return self.mu_u.size

    @property
    def n(self) -> int:
        return self.mu_v.size

    @classmethod
    def constant(cls, m: int, n: int, mu: float, lam_u: float, lam_v: float | None = None) -> VariationalParams:
        lam_v = lam_u if lam_v is None else lam_v
        return cls(
            mu_u=np.full(m, mu, dtype=np.float64),
            lam_u=np.full(m, lam_u, dtype=np.float64),
            mu_v=np.full(n, mu, dtype=np.float64),
            lam_v=np.full(n, lam_v, dtype=np.float64),
        )

    def check_grid(self, data: Dataset) -> None:
        if (self.m, self.n) != (data.m, data.n):
            raise DimensionMismatchError(
                f"variational parameters cover a {self.m}×{self.n} grid, data is {data.m}×{data.n}"
            )
