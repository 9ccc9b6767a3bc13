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

"""Synthetic crossed random effect datasets drawn from seeded, splittable RNG streams."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Literal

import numpy as np
from numpy.typing import ArrayLike, NDArray
from pydantic import BaseModel, ConfigDict, Field, PositiveFloat, PositiveInt, computed_field, model_validator
from scipy.special import expit

from crossed_gva.domain import Dataset
from crossed_gva.family import Family, FamilyTag, guarded_exp
from crossed_gva.utils.validation import Seed

logger = logging.getLogger("simulator")


class NormalCovariates(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: Literal["normal"] = "normal"
    mean: float = 1.0
    sd: float = Field(default=1.0, ge=0)


class FileCovariates(BaseModel):
    """Covariates supplied as an (m, n, p) array, e.g. taken from an ingested CSV."""

    model_config = ConfigDict(frozen=True)

    kind: Literal["file"] = "file"
    values: tuple[tuple[tuple[float, ...], ...], ...]

    @classmethod
    def from_array(cls, x: ArrayLike) -> FileCovariates:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 2:
            x = x[:, :, None]
        return cls(values=tuple(tuple(tuple(cell) for cell in row) for row in x.tolist()))

    def array(self) -> NDArray:
        return np.array(self.values, dtype=np.float64)


class SimSpec(BaseModel):
    """Simulation design; `beta` is (β₀, β₁, …) and the effect scales are standard deviations."""

    model_config = ConfigDict(frozen=True)

    family: Literal["poisson", "gamma", "logistic"] = "poisson"
    alpha: PositiveFloat | None = None
    m: PositiveInt = 50
    n: PositiveInt = 50
    beta: tuple[float, ...] = (-2.0, -2.0)
    sigma_u: PositiveFloat = 0.5
    sigma_v: PositiveFloat = 0.5
    covariate_law: NormalCovariates | FileCovariates = Field(default_factory=NormalCovariates, discriminator="kind")
    seed: Seed = 0

    @model_validator(mode="after")
    def check_design(self) -> SimSpec:
        if (self.alpha is None) == (self.family == "gamma"):
            raise ValueError("alpha is required for the gamma family and not accepted otherwise")
        if len(self.beta) < 1:
            raise ValueError("beta needs at least the intercept")
        if isinstance(self.covariate_law, FileCovariates):
            shape = self.covariate_law.array().shape
            if shape != (self.m, self.n, self.p):
                raise ValueError(f"file covariates have shape {shape}, expected {(self.m, self.n, self.p)}")
        return self

    @property
    def p(self) -> int:
        return len(self.beta) - 1

    @property
    def model_family(self) -> Family:
        return Family.parse(self.family, self.alpha)


class EffectSummary(BaseModel):
    mean: float
    variance: float


class TruthRecord(BaseModel):
    """Truth sidecar: the design plus summaries of the realized effects."""

    spec: SimSpec
    replicate: int = 0
    row_effects: EffectSummary
    col_effects: EffectSummary

    @computed_field
    @property
    def beta(self) -> tuple[float, ...]:
        return self.spec.beta

    @computed_field
    @property
    def sigma_u(self) -> float:
        return self.spec.sigma_u

    @computed_field
    @property
    def sigma_v(self) -> float:
        return self.spec.sigma_v


@dataclass(frozen=True)
class Simulation:
    data: Dataset
    truth: TruthRecord
    u: NDArray
    v: NDArray


def spawn_rng(seed: int, replicate: int = 0) -> np.random.Generator:
    """Independent stream per (seed, replicate), whatever the execution order."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(replicate,)))


def sample_response(family: Family, eta: ArrayLike, rng: np.random.Generator, size=None) -> NDArray:
    """
    Draw responses given the linear predictor. Gamma uses shape α and scale mean/α,
    so E Y = exp(η).
    """
    eta = np.asarray(eta, dtype=np.float64)
    if family.tag is FamilyTag.LOGISTIC:
        return rng.binomial(1, expit(eta), size=size).astype(np.float64)
    mean = guarded_exp(eta)
    if family.tag is FamilyTag.POISSON:
        return rng.poisson(mean, size=size).astype(np.float64)
    return rng.gamma(family.alpha, mean / family.alpha, size=size)


def _summary(effects: NDArray) -> EffectSummary:
    variance = float(np.var(effects, ddof=1)) if effects.size > 1 else 0.0
    return EffectSummary(mean=float(np.mean(effects)), variance=variance)


def simulate(spec: SimSpec, replicate: int = 0) -> Simulation:
    """Draw U, V, then X, then Y, in that order, from the stream of (spec.seed, replicate)."""
    rng = spawn_rng(spec.seed, replicate)
    family = spec.model_family
    u = rng.normal(0.0, spec.sigma_u, spec.m)
    v = rng.normal(0.0, spec.sigma_v, spec.n)
    if isinstance(spec.covariate_law, NormalCovariates):
        x = rng.normal(spec.covariate_law.mean, spec.covariate_law.sd, (spec.m, spec.n, spec.p))
    else:
        x = spec.covariate_law.array()
    beta = np.asarray(spec.beta)
    eta = beta[0] + x @ beta[1:] + u[:, None] + v[None, :]
    y = sample_response(family, eta, rng)

    logger.debug("simulated %d×%d %s grid (seed=%d, replicate=%d)", spec.m, spec.n, family.name, spec.seed, replicate)
    truth = TruthRecord(spec=spec, replicate=replicate, row_effects=_summary(u), col_effects=_summary(v))
    return Simulation(data=Dataset(y=y, x=x, family=family), truth=truth, u=u, v=v)
