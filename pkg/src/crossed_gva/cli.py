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
Command-line entry point: `crossed-gva simulate | fit | bench`.

Exit codes: 0 success, 2 usage error, 3 data error, 4 divergence or, with --strict,
a fit that did not converge.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from pydantic import ValidationError

from crossed_gva.application_context import ApplicationContext
from crossed_gva.domain import Dataset, DimensionMismatchError
from crossed_gva.family import Family, FamilyTag, ResponseDomainError
from crossed_gva.services.bench import BenchConfig, render_table
from crossed_gva.services.inference import asymptotic_se
from crossed_gva.services.optimizer import (
    DegenerateGridError,
    DivergenceError,
    FitConfig,
    FitResult,
    InitStrategy,
    Method,
    Scheme,
    fit,
)
from crossed_gva.services.quadrature import CorrectionError, QuadratureError, fit_logistic_experimental
from crossed_gva.services.simulator import NormalCovariates, SimSpec, simulate
from crossed_gva.services.storage import DataFormatError, read_dataset, read_truth, write_dataset, write_json
from crossed_gva.utils.validation import parse_name_list

logger = logging.getLogger("crossed_gva")

EXIT_OK = 0
EXIT_DATA = 3
EXIT_CONVERGENCE = 4

DATA_ERRORS = (DataFormatError, ResponseDomainError, DimensionMismatchError, DegenerateGridError)
DIVERGENCE_ERRORS = (DivergenceError, QuadratureError, CorrectionError)


def _add_family(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--family", choices=[t.value for t in FamilyTag], default="poisson")
    parser.add_argument("--alpha", type=float, help="Gamma shape (gamma family only)")


def _add_design(parser: argparse.ArgumentParser, m: int = 50, n: int = 50) -> None:
    parser.add_argument("--m", type=int, default=m, help="number of rows")
    parser.add_argument("--n", type=int, default=n, help="number of columns")
    parser.add_argument("--beta0", type=float, default=-2.0)
    parser.add_argument("--beta1", type=float, default=-2.0)
    parser.add_argument("--no-covariate", action="store_true", help="intercept-only design")
    parser.add_argument("--x-mean", type=float, default=1.0, help="mean of the normal covariate law")
    parser.add_argument("--x-sd", type=float, default=1.0, help="sd of the normal covariate law")
    parser.add_argument("--sigma-u", type=float, default=0.5)
    parser.add_argument("--sigma-v", type=float, default=0.5)
    parser.add_argument("--seed", type=int, default=0)


def _add_fit_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--init", choices=[s.value for s in InitStrategy], default=None)
    parser.add_argument("--scheme", choices=[s.value for s in Scheme], default=None)
    parser.add_argument("--restarts", type=int, default=None, help="jittered restarts after divergence")
    parser.add_argument("--max-iters", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crossed-gva",
        description="Gaussian variational fits of crossed random effect models.",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    sim = commands.add_parser("simulate", help="simulate a dataset and write it as CSV plus a truth sidecar")
    _add_family(sim)
    _add_design(sim)
    sim.add_argument("--replicate", type=int, default=0, help="replicate index of the seeded stream")
    sim.add_argument("--out", type=Path, required=True, help="CSV output path")
    sim.add_argument("--truth-out", type=Path, help="truth JSON path (default: <out>.truth.json)")

    fit_cmd = commands.add_parser("fit", help="fit a model to a long-format CSV and emit JSON")
    fit_cmd.add_argument("--method", choices=[m.value for m in Method], default=Method.GVACL.value)
    _add_family(fit_cmd)
    fit_cmd.add_argument("--data", type=Path, required=True)
    fit_cmd.add_argument("--scale", type=float, help="divide y and x by this factor before fitting")
    _add_fit_options(fit_cmd)
    fit_cmd.add_argument("--seed", type=int, default=0, help="seed for jittered starts")
    fit_cmd.add_argument("--strict", action="store_true", help="exit with 4 when the fit does not converge")
    fit_cmd.add_argument("--truth", type=Path, help="truth JSON written by `simulate`")
    fit_cmd.add_argument("--out", type=Path, help="JSON output path (default: stdout)")
    fit_cmd.add_argument("--experimental", action="store_true", help="allow the logistic model")

    bench = commands.add_parser("bench", help="Monte Carlo benchmark of simulate + fit cycles")
    _add_family(bench)
    _add_design(bench)
    bench.add_argument("--reps", type=int, default=200)
    bench.add_argument("--methods", default="gva,gvacl", help="comma separated: gva,gvacl")
    bench.add_argument("--jobs", type=int, default=None, help="worker processes")
    bench.add_argument("--rate-check", action="store_true", help="also run at (2m, 2n) and report SD ratios")
    _add_fit_options(bench)
    bench.add_argument("--out", type=Path, help="JSON output path (default: stdout)")
    return parser


def _family(parser: argparse.ArgumentParser, args: argparse.Namespace) -> Family:
    if args.family == FamilyTag.GAMMA.value and args.alpha is None:
        parser.error("--alpha is required for the gamma family")
    if args.family != FamilyTag.GAMMA.value and args.alpha is not None:
        parser.error("--alpha is only accepted with --family gamma")
    try:
        return Family.parse(args.family, args.alpha)
    except ValueError as e:
        parser.error(str(e))


def _sim_spec(parser: argparse.ArgumentParser, args: argparse.Namespace) -> SimSpec:
    _family(parser, args)
    beta = (args.beta0,) if args.no_covariate else (args.beta0, args.beta1)
    try:
        return SimSpec(
            family=args.family,
            alpha=args.alpha,
            m=args.m,
            n=args.n,
            beta=beta,
            sigma_u=args.sigma_u,
            sigma_v=args.sigma_v,
            covariate_law=NormalCovariates(mean=args.x_mean, sd=args.x_sd),
            seed=args.seed,
        )
    except ValidationError as e:
        parser.error(str(e))


def _fit_config(parser: argparse.ArgumentParser, args: argparse.Namespace, ctx: ApplicationContext, **fixed) -> FitConfig:
    overrides = dict(init=args.init, scheme=args.scheme, restarts=args.restarts, max_iters=args.max_iters)
    values = {**ctx.fit_config.model_dump(), **{k: v for k, v in overrides.items() if v is not None}, **fixed}
    try:
        return FitConfig.model_validate(values)
    except ValidationError as e:
        parser.error(str(e))


def cmd_simulate(parser: argparse.ArgumentParser, args: argparse.Namespace, ctx: ApplicationContext) -> int:
    spec = _sim_spec(parser, args)
    simulation = simulate(spec, args.replicate)
    write_dataset(simulation.data, args.out)
    truth_path = args.truth_out or args.out.with_suffix(".truth.json")
    write_json(simulation.truth.model_dump(mode="json"), truth_path)
    return EXIT_OK


def _named(beta: np.ndarray) -> dict[str, float]:
    return {f"beta{k}": float(b) for k, b in enumerate(beta)}


def fit_report(result: FitResult, data: Dataset, scale: float | None = None) -> dict[str, Any]:
    """JSON-ready report with a stable key order: method, family, estimates, se, diagnostics, extras."""
    estimates = _named(result.estimates.beta)
    estimates.update(sigma_u=result.estimates.sigma_u, sigma_v=result.estimates.sigma_v)

    se: dict[str, float | None] = {}
    plug_in = asymptotic_se(result, data)
    if plug_in is not None:
        se["beta0"] = plug_in.se_beta0
        if data.p >= 1:
            se["beta1"] = plug_in.se_beta1
        se.update(sigma_u=plug_in.se_sigma_u, sigma_v=plug_in.se_sigma_v)

    report: dict[str, Any] = {
        "method": result.method.value,
        "family": result.family.name,
        "estimates": estimates,
        "se": se,
        "diagnostics": {
            "iters": result.iters,
            "converged": result.converged,
            "elbo_final": result.elbo_final,
            "wall_time_s": result.wall_time,
            "elbo_initial": float(result.elbo_trace[0]),
            "elbo_trace_length": int(result.elbo_trace.size),
            "grad_norm": result.grad_norm,
            "boundary": result.boundary,
            "init_fallback": result.init_fallback,
            "message": result.message,
            **result.diagnostics,
        },
        "scale": 1.0 if scale is None else scale,
    }
    if result.family.alpha is not None:
        report["alpha"] = result.family.alpha
    if result.raw_composite is not None:
        raw = result.raw_composite
        report["raw_composite"] = {
            "beta0_r": raw.beta0_r,
            "beta0_c": raw.beta0_c,
            **{f"beta{k + 1}": float(b) for k, b in enumerate(raw.slopes)},
            "sigma2_u": raw.sigma2_u,
            "sigma2_v": raw.sigma2_v,
        }
    if plug_in is not None:
        report["se_basis"] = plug_in.basis
    if result.experimental:
        report["experimental"] = result.experimental
    return report


def _add_truth(report: dict[str, Any], truth_path: Path) -> None:
    truth = read_truth(truth_path)
    values = _named(np.asarray(truth.beta))
    values.update(sigma_u=truth.sigma_u, sigma_v=truth.sigma_v)
    report["truth"] = values
    report["delta"] = {k: report["estimates"][k] - v for k, v in values.items() if k in report["estimates"]}


def cmd_fit(parser: argparse.ArgumentParser, args: argparse.Namespace, ctx: ApplicationContext) -> int:
    family = _family(parser, args)
    method = Method(args.method)
    if family.tag is FamilyTag.LOGISTIC:
        if not args.experimental:
            parser.error("the logistic family is experimental; pass --experimental")
        if method is not Method.GVACL:
            parser.error("the logistic family is only fitted with --method gvacl")
        if args.scheme == Scheme.PROFILED.value:
            parser.error("the profiled scheme needs the poisson or gamma family")
    if args.scale is not None and args.scale <= 0:
        parser.error("--scale must be positive")
    fit_config = _fit_config(parser, args, ctx, method=method, seed=args.seed)

    data = read_dataset(args.data, family, scale=args.scale)
    if family.tag is FamilyTag.LOGISTIC:
        result = fit_logistic_experimental(data, fit_config)
    else:
        result = fit(data, fit_config)

    report = fit_report(result, data, args.scale)
    if args.truth is not None:
        _add_truth(report, args.truth)
    write_json(report, args.out)

    if args.strict and not result.converged:
        logger.error("fit did not converge: %s", result.message)
        return EXIT_CONVERGENCE
    return EXIT_OK


def cmd_bench(parser: argparse.ArgumentParser, args: argparse.Namespace, ctx: ApplicationContext) -> int:
    spec = _sim_spec(parser, args)
    try:
        methods = tuple(Method(name) for name in parse_name_list(args.methods))
    except ValueError as e:
        parser.error(str(e))
    if not methods:
        parser.error("--methods needs at least one of gva, gvacl")
    if spec.family == FamilyTag.LOGISTIC.value and methods != (Method.GVACL,):
        parser.error("the logistic family is only benchmarked with --methods gvacl")
    fit_config = _fit_config(parser, args, ctx)
    try:
        bench = BenchConfig(
            spec=spec,
            reps=args.reps,
            methods=methods,
            jobs=args.jobs or ctx.config.bench_jobs,
            rate_check=args.rate_check,
            fit_config=fit_config,
        )
    except ValidationError as e:
        parser.error(str(e))

    report = ctx.bench_runner.run(bench)
    table = render_table(report)
    payload = report.model_dump(mode="json")
    if args.out is not None:
        write_json(payload, args.out)
        sys.stdout.write(table)
    else:
        sys.stderr.write(table)
        write_json(payload)
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "bench": cmd_bench}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    ctx = ApplicationContext()
    token = ctx.run_id_context_var.set(args.command)
    try:
        return COMMANDS[args.command](parser, args, ctx)
    except DATA_ERRORS as e:
        logger.error("%s", e)
        return EXIT_DATA
    except DIVERGENCE_ERRORS as e:
        logger.error("%s", e)
        return EXIT_CONVERGENCE
    finally:
        ctx.run_id_context_var.reset(token)


if __name__ == "__main__":
    raise SystemExit(main())
