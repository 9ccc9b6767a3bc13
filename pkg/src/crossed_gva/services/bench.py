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
Monte Carlo benchmark harness: repeated simulate + fit cycles aggregated into a
summary table (Mean(SD), MESE, mean time per fit).
"""

from __future__ import annotations

import logging
from contextvars import ContextVar
from functools import cache, partial
from typing import TYPE_CHECKING

import anyio
import anyio.to_process
import numpy as np
from pydantic import BaseModel, ConfigDict, Field, PositiveFloat, PositiveInt, model_validator

from crossed_gva.family import FamilyTag
from crossed_gva.services.inference import NormalMgf, SingularMgfError, asymptotic_se, se_beta1_poisson
from crossed_gva.services.optimizer import DivergenceError, FitConfig, FitResult, Method, Scheme, fit
from crossed_gva.services.quadrature import CorrectionError, QuadratureError, fit_logistic_experimental
from crossed_gva.services.simulator import NormalCovariates, SimSpec, simulate

if TYPE_CHECKING:
    from crossed_gva.utils.report_archive import ReportArchive

logger = logging.getLogger("bench")


class BenchConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    spec: SimSpec
    reps: PositiveInt = 200
    methods: tuple[Method, ...] = (Method.FULL_GVA, Method.GVACL)
    jobs: PositiveInt = 1
    rate_check: bool = False
    fit_config: FitConfig = Field(default_factory=FitConfig)

    @model_validator(mode="after")
    def _profiled_needs_composite(self) -> BenchConfig:
        if self.fit_config.scheme is Scheme.PROFILED and Method.FULL_GVA in self.methods:
            raise ValueError("the profiled scheme cannot run the full (gva) fit")
        return self


class ReplicateRecord(BaseModel):
    replicate: int
    method: Method
    converged: bool
    wall_time: float
    estimates: dict[str, float] = {}
    se: dict[str, float | None] = {}
    error: str | None = None


class ParameterSummary(BaseModel):
    truth: float
    mean: float | None
    sd: float | None
    mese: float | None


class MethodBlock(BaseModel):
    method: Method
    replicates: int
    converged: int
    failures: int
    errors: int
    mean_time_s: float | None
    parameters: dict[str, ParameterSummary]


class RateCheck(BaseModel):
    m: int
    n: int
    sd_ratio: dict[str, dict[str, float | None]]
    time_ratio_gva_over_gvacl: float | None = None


class Reconciliation(BaseModel):
    covariate_law: str
    se_beta1_poisson: float | None
    mese_beta1: float | None
    mc_sd_beta1: float | None
    note: str = "reported, not asserted"


class BenchReport(BaseModel):
    family: str
    alpha: PositiveFloat | None
    m: int
    n: int
    reps: int
    seed: int
    methods: dict[str, MethodBlock]
    time_ratio_gva_over_gvacl: float | None = None
    rate_check: RateCheck | None = None
    reconciliation: Reconciliation | None = None


def truth_values(spec: SimSpec) -> dict[str, float]:
    values = {f"beta{k}": float(b) for k, b in enumerate(spec.beta)}
    values.update(sigma_u=spec.sigma_u, sigma_v=spec.sigma_v)
    return values


def _fit(data, fit_config: FitConfig) -> FitResult:
    if data.family.tag is FamilyTag.LOGISTIC:
        return fit_logistic_experimental(data, fit_config)
    return fit(data, fit_config)


def run_replicate(spec: SimSpec, replicate: int, fit_config: FitConfig) -> ReplicateRecord:
    """One simulate + fit cycle. Top level so worker processes can import it."""
    simulation = simulate(spec, replicate)
    try:
        result = _fit(simulation.data, fit_config)
    except (DivergenceError, QuadratureError, CorrectionError, ArithmeticError, ValueError) as e:
        logger.warning("replicate %d (%s) failed: %s", replicate, fit_config.method.value, e)
        return ReplicateRecord(
            replicate=replicate, method=fit_config.method, converged=False, wall_time=0.0, error=str(e)
        )

    estimates = {f"beta{k}": float(b) for k, b in enumerate(result.estimates.beta)}
    estimates.update(sigma_u=result.estimates.sigma_u, sigma_v=result.estimates.sigma_v)
    se: dict[str, float | None] = {}
    plug_in = asymptotic_se(result, simulation.data)
    if plug_in is not None:
        se = {"beta0": plug_in.se_beta0, "sigma_u": plug_in.se_sigma_u, "sigma_v": plug_in.se_sigma_v}
        if spec.p >= 1:
            se["beta1"] = plug_in.se_beta1
    return ReplicateRecord(
        replicate=replicate,
        method=fit_config.method,
        converged=result.converged,
        wall_time=result.wall_time,
        estimates=estimates,
        se=se,
    )


@cache
def _worker_context():
    # imported here: the application context itself imports this module
    from crossed_gva.application_context import ApplicationContext

    return ApplicationContext()


def run_replicate_in_worker(spec: SimSpec, replicate: int, fit_config: FitConfig, run_id: str) -> ReplicateRecord:
    """Entry point in a worker process: logging is set up once per process and records carry `run_id`."""
    run_id_context_var = _worker_context().run_id_context_var
    token = run_id_context_var.set(run_id)
    try:
        return run_replicate(spec, replicate, fit_config)
    finally:
        run_id_context_var.reset(token)


def _run_id(replicate: int, method: Method) -> str:
    return f"rep-{replicate}/{method.value}"


def _mean(values: list[float]) -> float | None:
    return float(np.mean(values)) if values else None


def _sd(values: list[float]) -> float | None:
    return float(np.std(values, ddof=1)) if len(values) >= 2 else None


def summarize(spec: SimSpec, method: Method, records: list[ReplicateRecord]) -> MethodBlock:
    """Statistics over converged fits only; failures and errors are counted separately."""
    records = sorted(records, key=lambda r: r.replicate)
    converged = [r for r in records if r.converged]
    parameters = {}
    for name, truth in truth_values(spec).items():
        values = [r.estimates[name] for r in converged]
        ses = [r.se[name] for r in converged if r.se.get(name) is not None]
        parameters[name] = ParameterSummary(truth=truth, mean=_mean(values), sd=_sd(values), mese=_mean(ses))
    errors = sum(1 for r in records if r.error is not None)
    return MethodBlock(
        method=method,
        replicates=len(records),
        converged=len(converged),
        failures=len(records) - len(converged) - errors,
        errors=errors,
        mean_time_s=_mean([r.wall_time for r in converged]),
        parameters=parameters,
    )


def _ratio(a: float | None, b: float | None) -> float | None:
    return a / b if a is not None and b else None


class BenchRunner:
    """Runs replicate cycles in a pool of `jobs` worker processes (in-process when jobs == 1)."""

    def __init__(
        self,
        run_id_context_var: ContextVar | None = None,
        archive: ReportArchive | None = None,
    ):
        self.run_id_context_var = run_id_context_var
        self.archive = archive

    async def _collect(self, bench: BenchConfig, spec: SimSpec) -> dict[Method, list[ReplicateRecord]]:
        records: dict[Method, list[ReplicateRecord]] = {method: [] for method in bench.methods}
        limiter = anyio.CapacityLimiter(bench.jobs)

        async def one(replicate: int, method: Method) -> None:
            fit_config = bench.fit_config.model_copy(update={"method": method})
            record = await anyio.to_process.run_sync(
                partial(run_replicate_in_worker, spec, replicate, fit_config, _run_id(replicate, method)), limiter=limiter
            )
            records[method].append(record)

        async with anyio.create_task_group() as tg:
            for replicate in range(bench.reps):
                for method in bench.methods:
                    tg.start_soon(one, replicate, method)
        return records

    def _collect_in_process(self, bench: BenchConfig, spec: SimSpec) -> dict[Method, list[ReplicateRecord]]:
        records: dict[Method, list[ReplicateRecord]] = {method: [] for method in bench.methods}
        for replicate in range(bench.reps):
            for method in bench.methods:
                token = self.run_id_context_var.set(_run_id(replicate, method)) if self.run_id_context_var else None
                try:
                    fit_config = bench.fit_config.model_copy(update={"method": method})
                    records[method].append(run_replicate(spec, replicate, fit_config))
                finally:
                    if token is not None:
                        self.run_id_context_var.reset(token)
        return records

    def _blocks(self, bench: BenchConfig, spec: SimSpec) -> dict[str, MethodBlock]:
        if bench.jobs == 1:
            records = self._collect_in_process(bench, spec)
        else:
            records = anyio.run(self._collect, bench, spec)
        blocks = {method.value: summarize(spec, method, records[method]) for method in bench.methods}
        for block in blocks.values():
            logger.info(
                "%s: %d/%d converged, mean time %s s",
                block.method.value,
                block.converged,
                block.replicates,
                "n/a" if block.mean_time_s is None else f"{block.mean_time_s:.3f}",
            )
        return blocks

    def run(self, bench: BenchConfig) -> BenchReport:
        spec = bench.spec
        logger.info("benchmark: %s %d×%d, %d replicates, methods %s", spec.family, spec.m, spec.n, bench.reps, ",".join(m.value for m in bench.methods))
        methods = self._blocks(bench, spec)
        report = BenchReport(
            family=spec.family,
            alpha=spec.alpha,
            m=spec.m,
            n=spec.n,
            reps=bench.reps,
            seed=spec.seed,
            methods=methods,
            time_ratio_gva_over_gvacl=_time_ratio(methods),
        )

        if bench.rate_check:
            doubled = spec.model_copy(update={"m": 2 * spec.m, "n": 2 * spec.n})
            larger = self._blocks(bench, doubled)
            report.rate_check = RateCheck(
                m=doubled.m,
                n=doubled.n,
                sd_ratio={
                    name: {
                        parameter: _ratio(summary.sd, larger[name].parameters[parameter].sd)
                        for parameter, summary in block.parameters.items()
                    }
                    for name, block in methods.items()
                },
                time_ratio_gva_over_gvacl=_time_ratio(larger),
            )

        if spec.family == "poisson" and Method.GVACL.value in methods and spec.p == 1:
            report.reconciliation = reconcile_poisson_slope(spec, methods[Method.GVACL.value])

        if self.archive is not None:
            report_id = self.archive.register(report)
            logger.info("archived report %s", report_id)
        return report


def _time_ratio(blocks: dict[str, MethodBlock]) -> float | None:
    if Method.FULL_GVA.value not in blocks or Method.GVACL.value not in blocks:
        return None
    return _ratio(blocks[Method.FULL_GVA.value].mean_time_s, blocks[Method.GVACL.value].mean_time_s)


def reconcile_poisson_slope(spec: SimSpec, block: MethodBlock) -> Reconciliation:
    """Slope SE formula at the truth under the normal covariate MGF, next to the MESE and the Monte Carlo SD."""
    law = spec.covariate_law
    mgf = NormalMgf(law.mean, law.sd) if isinstance(law, NormalCovariates) else None
    formula = None
    if mgf is not None:
        try:
            formula = se_beta1_poisson(
                spec.beta[0], spec.beta[1], spec.sigma_u**2, spec.sigma_v**2, spec.m, spec.n, mgf
            )
        except SingularMgfError as e:
            logger.warning("slope SE formula unavailable: %s", e)
    summary = block.parameters["beta1"]
    return Reconciliation(
        covariate_law=mgf.law if mgf is not None else "file",
        se_beta1_poisson=formula,
        mese_beta1=summary.mese,
        mc_sd_beta1=summary.sd,
    )


def _cell(value: float | None, digits: int = 2) -> str:
    return "NA" if value is None else f"{value:.{digits}f}"


def render_table(report: BenchReport) -> str:
    """One row per parameter with Mean(SD) and MESE per method, then timing and failure rows."""
    names = list(report.methods)
    header = f"{'':<10}" + "".join(f"{name.upper() + ' Mean(SD)':>22}{'MESE':>8}" for name in names)
    lines = [f"{report.family.capitalize()} (m,n)=({report.m},{report.n}), {report.reps} replicates", header]
    first = report.methods[names[0]]
    for parameter in first.parameters:
        row = f"{parameter:<10}"
        for name in names:
            summary = report.methods[name].parameters[parameter]
            row += f"{_cell(summary.mean) + '(' + _cell(summary.sd) + ')':>22}{_cell(summary.mese):>8}"
        lines.append(row)
    lines.append(f"{'Time(s)':<10}" + "".join(f"{_cell(report.methods[n].mean_time_s):>22}{'':>8}" for n in names))
    lines.append(
        f"{'Failed':<10}"
        + "".join(f"{report.methods[n].failures + report.methods[n].errors:>22d}{'':>8}" for n in names)
    )
    return "\n".join(lines) + "\n"
