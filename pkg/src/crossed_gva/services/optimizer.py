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
Maximization of the full and composite variational bounds.

Every scheme hands the negated bound on the transformed scale (log σ², log λ) to scipy's
L-BFGS-B. `joint` optimizes every parameter at once, `block` alternates ξ alone and Ψ
alone, and `profiled` (composite fits with a closed-form family, the default there)
optimizes Ψ^rc alone while `CompositeProfile` solves the row and column problems exactly.

A fit is converged only when the projected gradient is below `grad_tol`. When L-BFGS-B
stops on its relative-change test first, it is restarted from where it stopped.
"""

from __future__ import annotations

import enum
import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
import statsmodels.api as sm
from numpy.typing import NDArray
from pydantic import BaseModel, ConfigDict, NonNegativeFloat, NonNegativeInt, PositiveFloat, PositiveInt, model_validator
from scipy.optimize import OptimizeResult, minimize
from tenacity import Retrying, before_sleep_log, retry_if_exception_type, stop_after_attempt

from crossed_gva.config import Config
from crossed_gva.domain import CompositeParams, Dataset, ModelParams, VariationalParams
from crossed_gva.family import CellKernel, Family, FamilyTag, OverflowGuardError, UnsupportedFamilyError
from crossed_gva.services.elbo import ParameterLayout, composite_elbo_and_grad, full_elbo_and_grad
from crossed_gva.services.inference import recover_intercept
from crossed_gva.services.profile import CompositeProfile
from crossed_gva.utils.validation import NodeCount, Seed

logger = logging.getLogger("optimizer")
config = Config()

# a trial point that trips the overflow guard is reported to L-BFGS-B this far above the last iterate
_OVERFLOW_WALL = 1e4


class Method(str, enum.Enum):
    FULL_GVA = "gva"
    GVACL = "gvacl"

    @classmethod
    def _missing_(cls, value):
        if isinstance(value, str) and value.lower() == "full_gva":
            return cls.FULL_GVA
        return None

    @property
    def composite(self) -> bool:
        return self is Method.GVACL


class InitStrategy(str, enum.Enum):
    MOMENTS = "moments"
    ZEROS = "zeros"


class Scheme(str, enum.Enum):
    JOINT = "joint"
    BLOCK = "block"
    PROFILED = "profiled"


@dataclass
class DegenerateGridError(Exception):
    m: int
    n: int

    def __str__(self) -> str:
        return (
            f"the composite fit needs at least two rows and two columns, got a {self.m}×{self.n} grid"
        )


@dataclass
class DivergenceError(Exception):
    block: str
    detail: str

    def __str__(self) -> str:
        return f"optimizer diverged in the {self.block}: {self.detail}"


class FitConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    method: Method = Method.GVACL
    max_iters: PositiveInt = 500
    rel_tol: PositiveFloat = 1e-8
    grad_tol: PositiveFloat = 1e-6
    init: InitStrategy = InitStrategy.MOMENTS
    seed: Seed = 0
    # None: profiled for composite closed-form fits, joint otherwise
    scheme: Scheme | None = None
    sigma2_floor: PositiveFloat = 1e-6
    variance_ceiling: PositiveFloat = 100.0
    moments_sigma2_floor: PositiveFloat = 0.01
    history: PositiveInt = 10
    max_line_search: PositiveInt = 40
    jitter: NonNegativeFloat = 0.0
    restarts: NonNegativeInt = 0
    quad_nodes: NodeCount = 15

    @model_validator(mode="after")
    def _profiled_needs_composite(self) -> FitConfig:
        if self.scheme is Scheme.PROFILED and not self.method.composite:
            raise ValueError("the profiled scheme is only available for the composite (gvacl) fit")
        return self

    @classmethod
    def from_config(cls, config: Config, **overrides) -> FitConfig:
        defaults = dict(
            max_iters=config.max_iters,
            rel_tol=config.rel_tol,
            grad_tol=config.grad_tol,
            sigma2_floor=config.sigma2_floor,
            variance_ceiling=config.variance_ceiling,
            moments_sigma2_floor=config.moments_sigma2_floor,
            history=config.lbfgs_history,
            max_line_search=config.max_line_search,
            restarts=config.fit_restarts,
            quad_nodes=config.quad_nodes_1d,
        )
        defaults.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**defaults)


@dataclass(frozen=True)
class FitResult:
    method: Method
    family: Family
    estimates: ModelParams
    raw_composite: CompositeParams | None
    xi_hat: VariationalParams
    elbo_trace: NDArray
    converged: bool
    iters: int
    wall_time: float
    boundary: bool = False
    grad_norm: float = float("nan")
    message: str = ""
    init_fallback: bool = False
    experimental: str | None = None
    diagnostics: dict[str, float] = field(default_factory=dict)

    @property
    def elbo_final(self) -> float:
        return float(self.elbo_trace[-1])


@dataclass(frozen=True)
class InitialValues:
    params: ModelParams | CompositeParams
    xi: VariationalParams
    fallback: bool = False

    @property
    def pair(self) -> tuple[ModelParams | CompositeParams, VariationalParams]:
        return self.params, self.xi


def _glm_family(family: Family):
    if family.tag is FamilyTag.POISSON:
        return sm.families.Poisson()
    if family.tag is FamilyTag.GAMMA:
        return sm.families.Gamma(link=sm.families.links.Log())
    return sm.families.Binomial()


def _between_variance(means: NDArray, floor: float) -> float:
    if means.size < 2:
        return floor
    value = float(np.var(means, ddof=1))
    return max(value, floor) if np.isfinite(value) else floor


def _zeros(data: Dataset, composite: bool) -> tuple[ModelParams | CompositeParams, VariationalParams]:
    xi = VariationalParams.constant(data.m, data.n, mu=0.0, lam_u=1.0)
    if composite:
        return CompositeParams(0.0, 0.0, np.zeros(data.p), 1.0, 1.0), xi
    return ModelParams(np.zeros(data.p + 1), 1.0, 1.0), xi


def initialize(
    data: Dataset,
    strategy: InitStrategy = InitStrategy.MOMENTS,
    method: Method = Method.FULL_GVA,
    sigma2_floor: float = 0.01,
) -> InitialValues:
    """
    Starting values for a fit.

    `moments` fits a GLM without random effects (25 Fisher scoring steps) and takes σ²
    from the spread of row and column means of its working residuals; `zeros` is
    β = 0, σ² = 1, μ = 0, λ = 1.
    """
    strategy = InitStrategy(strategy)
    if strategy is InitStrategy.ZEROS:
        return InitialValues(*_zeros(data, method.composite))

    exog = np.column_stack([np.ones(data.m * data.n), data.x.reshape(data.m * data.n, data.p)])
    try:
        glm = sm.GLM(data.y.reshape(-1), exog, family=_glm_family(data.family))
        glm_result = glm.fit(method="IRLS", maxiter=25)
        beta = np.asarray(glm_result.params, dtype=np.float64)
        residuals = np.asarray(glm_result.resid_working, dtype=np.float64).reshape(data.m, data.n)
        if not (np.all(np.isfinite(beta)) and np.all(np.isfinite(residuals))):
            raise ValueError("non-finite GLM estimates")
    except Exception as e:
        logger.warning("Fisher scoring failed (%s), starting from zeros", e)
        return InitialValues(*_zeros(data, method.composite), fallback=True)

    sigma2_u = _between_variance(residuals.mean(axis=1), sigma2_floor)
    sigma2_v = _between_variance(residuals.mean(axis=0), sigma2_floor)
    xi = VariationalParams.constant(data.m, data.n, mu=0.0, lam_u=sigma2_u, lam_v=sigma2_v)
    if method.composite:
        params = CompositeParams(beta[0], beta[0], beta[1:], sigma2_u, sigma2_v)
    else:
        params = ModelParams(beta, sigma2_u, sigma2_v)
    return InitialValues(params, xi)


def jitter_means(xi: VariationalParams, scale: float, rng: np.random.Generator) -> VariationalParams:
    if scale <= 0:
        return xi
    return replace(
        xi,
        mu_u=xi.mu_u + rng.normal(0.0, scale, xi.m),
        mu_v=xi.mu_v + rng.normal(0.0, scale, xi.n),
    )


Objective = Callable[[NDArray], tuple[float, NDArray]]


@dataclass
class _Objective:
    """Negated bound on the flat transformed vector, so the solver minimizes."""

    layout: ParameterLayout
    data: Dataset
    kernel: CellKernel | None

    def __call__(self, vector: NDArray) -> tuple[float, NDArray]:
        params, xi = self.layout.unpack(vector)
        if self.layout.composite:
            value, grad = composite_elbo_and_grad(params, xi, self.data, self.kernel)
        else:
            value, grad = full_elbo_and_grad(params, xi, self.data, self.kernel)
        return -value, -self.layout.pack_gradient(grad, params, xi)


@dataclass
class _ProfiledObjective:
    """Negated profiled composite bound over the Ψ^rc coordinates of the layout."""

    layout: ParameterLayout
    profile: CompositeProfile

    def params(self, vector: NDArray) -> CompositeParams:
        s = self.layout.slices
        beta = vector[s["beta"]]
        sigma2_u, sigma2_v = np.exp(vector[s["log_sigma2"]])
        return CompositeParams(beta[0], beta[1], beta[2:], sigma2_u, sigma2_v)

    def evaluate(self, vector: NDArray):
        params = self.params(vector)
        value, grad = self.profile.evaluate(params)
        return params, value, grad

    def __call__(self, vector: NDArray) -> tuple[float, NDArray]:
        params, value, grad = self.evaluate(vector)
        packed = self.layout.pack_gradient(grad, params, self.profile.xi)
        return -value, -packed[: self.layout.psi_size]


@dataclass
class _SolverState:
    x: NDArray
    f: float
    g: NDArray
    trace: list[float]
    iters: int = 0
    converged: bool = False
    message: str = ""


def _projected_gradient(x: NDArray, g: NDArray, lower: NDArray, upper: NDArray) -> NDArray:
    pg = g.copy()
    pg[(x <= lower) & (pg > 0)] = 0.0
    pg[(x >= upper) & (pg < 0)] = 0.0
    return pg


def _max_abs(values: NDArray) -> float:
    return float(np.max(np.abs(values), initial=0.0))


@dataclass
class _Run:
    """
    One L-BFGS-B run over the free coordinates of `state.x`, as scipy sees it.

    Accepted iterates arrive through `accept` and extend the trace. An overflowing trial
    is answered with a wall above the last iterate so the line search backs off.
    """

    objective: Objective
    state: _SolverState
    free: NDArray
    accepted: int = 0
    trials: int = 0
    overflowed: int = 0
    overflow: OverflowGuardError | None = None
    _last: tuple[NDArray, float, NDArray] | None = None

    def _full(self, vector: NDArray) -> NDArray:
        x = self.state.x.copy()
        x[self.free] = vector
        return x

    def __call__(self, vector: NDArray) -> tuple[float, NDArray]:
        x = self._full(vector)
        self.trials += 1
        try:
            f, g = self.objective(x)
        except OverflowGuardError as e:
            self.overflow, self.overflowed = e, self.overflowed + 1
            return self.state.f + _OVERFLOW_WALL * (1.0 + abs(self.state.f)), np.zeros_like(vector)
        self._last = (x, f, g)
        return f, g[self.free]

    def accept(self, intermediate_result: OptimizeResult) -> None:
        x = self._full(intermediate_result.x)
        if self._last is not None and np.array_equal(self._last[0], x):
            _, f, g = self._last
        else:
            f, g = self.objective(x)
        self.state.x, self.state.f, self.state.g = x, f, g
        self.state.iters += 1
        self.state.trace.append(-f)
        self.accepted += 1
        self.trials = self.overflowed = 0
        logger.debug("iteration %d: objective %.12g", self.state.iters, -f)


def _lbfgsb(
    objective: Objective,
    state: _SolverState,
    free: NDArray,
    bounds: tuple[NDArray, NDArray],
    fit_config: FitConfig,
    budget: int,
) -> None:
    """Minimize over the free coordinates until the projected gradient passes or `budget` iterations are spent."""
    lower, upper = bounds
    scipy_bounds = list(zip(lower[free], upper[free]))
    state.converged = False
    spent = 0
    while True:
        pg = _projected_gradient(state.x, state.g, lower, upper)[free]
        if _max_abs(pg) <= fit_config.grad_tol:
            state.converged, state.message = True, "projected gradient below tolerance"
            return
        if spent >= budget:
            state.message = "iteration limit reached"
            return

        run = _Run(objective=objective, state=state, free=free)
        result = minimize(
            run,
            state.x[free],
            jac=True,
            method="L-BFGS-B",
            bounds=scipy_bounds,
            callback=run.accept,
            options={
                "maxiter": budget - spent,
                "maxcor": fit_config.history,
                "maxls": fit_config.max_line_search,
                "ftol": fit_config.rel_tol,
                "gtol": fit_config.grad_tol,
            },
        )
        spent += run.accepted
        if run.accepted == 0:
            if run.trials and run.overflowed == run.trials:
                raise DivergenceError(block=run.overflow.block, detail=str(run.overflow)) from run.overflow
            state.message = f"line search failed to make progress ({result.message})"
            return
        logger.debug("L-BFGS-B stopped after %d iterations: %s", run.accepted, result.message)


def _start(objective: Objective, x0: NDArray) -> _SolverState:
    try:
        f0, g0 = objective(x0)
    except OverflowGuardError as e:
        raise DivergenceError(block=e.block, detail=f"at the starting values: {e}") from e
    return _SolverState(x=x0, f=f0, g=g0, trace=[-f0])


def _run_scheme(objective: _Objective, x0: NDArray, fit_config: FitConfig, scheme: Scheme) -> _SolverState:
    layout = objective.layout
    bounds = layout.bounds(fit_config.sigma2_floor, fit_config.variance_ceiling)
    state = _start(objective, np.clip(x0, *bounds))
    everything = np.ones(layout.size, dtype=bool)

    if scheme is Scheme.JOINT:
        _lbfgsb(objective, state, everything, bounds, fit_config, fit_config.max_iters)
        return state

    variational = layout.variational_mask()
    for sweep in range(fit_config.max_iters):
        start = state.f
        _lbfgsb(objective, state, variational, bounds, fit_config, fit_config.max_iters)
        _lbfgsb(objective, state, ~variational, bounds, fit_config, fit_config.max_iters)
        if _max_abs(_projected_gradient(state.x, state.g, *bounds)) <= fit_config.grad_tol:
            state.converged, state.message = True, "projected gradient below tolerance"
            return state
        if abs(state.f - start) / max(abs(start), abs(state.f), 1.0) <= fit_config.rel_tol:
            state.converged, state.message = False, f"block sweep {sweep + 1} stalled above the gradient tolerance"
            return state
    state.converged, state.message = False, "sweep limit reached"
    return state


def _run_profiled(
    layout: ParameterLayout,
    data: Dataset,
    params: CompositeParams,
    xi: VariationalParams,
    fit_config: FitConfig,
) -> tuple[_SolverState, NDArray, NDArray]:
    """Outer L-BFGS-B over Ψ^rc; returns the state with the full (Ψ^rc, ξ) vector and its negated gradient."""
    objective = _ProfiledObjective(layout=layout, profile=CompositeProfile(data=data, xi=xi))
    lower, upper = layout.bounds(fit_config.sigma2_floor, fit_config.variance_ceiling)
    psi = slice(0, layout.psi_size)
    bounds = lower[psi], upper[psi]
    state = _start(objective, np.clip(layout.pack(params, xi)[psi], *bounds))
    _lbfgsb(objective, state, np.ones(layout.psi_size, dtype=bool), bounds, fit_config, fit_config.max_iters)

    params, _, grad = objective.evaluate(state.x)
    xi_hat = objective.profile.xi
    logger.debug("profiled fit used %d inner solves", objective.profile.evaluations)
    return state, layout.pack(params, xi_hat), -layout.pack_gradient(grad, params, xi_hat)


def resolve_scheme(fit_config: FitConfig, data: Dataset, kernel: CellKernel | None = None) -> Scheme:
    closed_form = kernel is None and data.family.has_closed_form
    if fit_config.scheme is None:
        return Scheme.PROFILED if fit_config.method.composite and closed_form else Scheme.JOINT
    if fit_config.scheme is Scheme.PROFILED and not fit_config.method.composite:
        raise ValueError("the profiled scheme is only available for the composite (gvacl) fit")
    if fit_config.scheme is Scheme.PROFILED and not closed_form:
        raise UnsupportedFamilyError(family=data.family.name, operation="the profiled scheme")
    return fit_config.scheme


def _estimates(params: ModelParams | CompositeParams) -> ModelParams:
    if isinstance(params, ModelParams):
        return params
    beta0 = recover_intercept(params.beta0_r, params.beta0_c, params.sigma2_u, params.sigma2_v)
    return ModelParams(np.concatenate(([beta0], params.slopes)), params.sigma2_u, params.sigma2_v)


def _fit_once(
    data: Dataset, fit_config: FitConfig, attempt: int, kernel: CellKernel | None
) -> FitResult:
    started = time.perf_counter()
    method = fit_config.method
    scheme = resolve_scheme(fit_config, data, kernel)
    layout = ParameterLayout.for_data(data, method.composite)
    rng = np.random.default_rng(np.random.SeedSequence(fit_config.seed, spawn_key=(attempt,)))

    if attempt == 0:
        init = initialize(data, fit_config.init, method, fit_config.moments_sigma2_floor)
        xi = jitter_means(init.xi, fit_config.jitter, rng)
    else:
        init = initialize(data, InitStrategy.ZEROS, method)
        xi = jitter_means(init.xi, max(fit_config.jitter, 0.1), rng)

    if scheme is Scheme.PROFILED:
        state, x, g = _run_profiled(layout, data, init.params, xi, fit_config)
    else:
        objective = _Objective(layout=layout, data=data, kernel=kernel)
        state = _run_scheme(objective, layout.pack(init.params, xi), fit_config, scheme)
        x, g = state.x, state.g

    params, xi_hat = layout.unpack(x)
    lower, upper = layout.bounds(fit_config.sigma2_floor, fit_config.variance_ceiling)
    sigma_slice = layout.slices["log_sigma2"]
    boundary = bool(
        np.any(x[sigma_slice] <= lower[sigma_slice] + 1e-9)
        or np.any(x[sigma_slice] >= upper[sigma_slice] - 1e-9)
    )

    result = FitResult(
        method=method,
        family=data.family,
        estimates=_estimates(params),
        raw_composite=params if method.composite else None,
        xi_hat=xi_hat,
        elbo_trace=np.asarray(state.trace),
        converged=state.converged,
        iters=state.iters,
        wall_time=time.perf_counter() - started,
        boundary=boundary,
        grad_norm=_max_abs(_projected_gradient(x, g, lower, upper)),
        message=state.message,
        init_fallback=init.fallback,
    )
    logger.info(
        "%s fit (%s) on %d×%d %s grid: converged=%s iters=%d elbo=%.6f time=%.3fs",
        method.value,
        scheme.value,
        data.m,
        data.n,
        data.family.name,
        result.converged,
        result.iters,
        result.elbo_final,
        result.wall_time,
    )
    return result


def fit(
    data: Dataset,
    fit_config: FitConfig | None = None,
    kernel: CellKernel | None = None,
) -> FitResult:
    """
    Maximize the full (`gva`) or composite (`gvacl`) bound over (Ψ, ξ).

    Non-convergence is reported through `FitResult.converged`. Divergence raises
    `DivergenceError`; with `restarts > 0` the fit is retried from jittered zeros first.
    """
    fit_config = fit_config or FitConfig.from_config(config)
    if fit_config.method.composite and (data.m < 2 or data.n < 2):
        raise DegenerateGridError(data.m, data.n)

    retrying = Retrying(
        retry=retry_if_exception_type(DivergenceError),
        stop=stop_after_attempt(fit_config.restarts + 1),
        before_sleep=before_sleep_log(logger, logging.WARNING),
        reraise=True,
    )
    for attempt in retrying:
        with attempt:
            return _fit_once(data, fit_config, attempt.retry_state.attempt_number - 1, kernel)
