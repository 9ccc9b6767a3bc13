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

from pydantic_settings import BaseSettings, SettingsConfigDict


class Config(BaseSettings):
    model_config = SettingsConfigDict(env_prefix="CRGVA_", env_ignore_empty=True)

    # logging config: https://docs.python.org/3/library/logging.config.html#logging-config-dictschema
    logging_config: dict = {
        "version": 1,
        "disable_existing_loggers": False,
        "handlers": {
            "console": {
                "class": "logging.StreamHandler",
                "formatter": "standard",
            },
        },
        "formatters": {
            "standard": {
                "format": "[%(levelname)s] [%(run_id)s] %(name)s: %(message)s",
            },
        },
        "root": {
            "level": "WARNING",
            "handlers": ["console"],
            "propagate": True,
        },
        "loggers": {
            "optimizer": {"level": "INFO"},
            "bench": {"level": "INFO"},
            "simulator": {"level": "INFO"},
            "storage": {"level": "INFO"},
            "quadrature": {"level": "INFO"},
            "report_archive": {"level": "INFO"},
        },
    }

    # largest exponent (natural log scale) evaluated before raising instead of overflowing
    exp_cap: float = 700.0

    # optimizer stopping rule
    max_iters: int = 500
    rel_tol: float = 1e-8
    grad_tol: float = 1e-6

    # lower box for variance components on the natural scale
    sigma2_floor: float = 1e-6

    # floor for variance components produced by the `moments` initializer
    moments_sigma2_floor: float = 0.01

    # upper box for variance components and variational variances
    variance_ceiling: float = 100.0

    # L-BFGS-B memory and line search evaluations per iteration
    lbfgs_history: int = 10
    max_line_search: int = 40

    # Gauss-Hermite node counts for the logistic model
    quad_nodes_1d: int = 15
    quad_nodes_2d: int = 15

    # jittered restarts after a divergent fit, 0 = fail on first divergence
    fit_restarts: int = 0

    # worker processes for the bench harness
    bench_jobs: int = 1

    # sqlite file for archived bench reports, empty = archive disabled
    archive_path: str = ""
