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

from contextvars import ContextVar
import logging
import logging.config
from functools import cached_property

from crossed_gva.config import Config
from crossed_gva.services.bench import BenchRunner
from crossed_gva.services.optimizer import FitConfig
from crossed_gva.utils.report_archive import ReportArchive


class ApplicationContext:
    def __init__(self) -> None:
        self.setup_logging()

    def setup_logging(self):
        logging.config.dictConfig(self.config.logging_config)
        run_id_context_var = self.run_id_context_var

        class RunIdFilter(logging.Filter):
            def filter(self, record):
                record.run_id = run_id_context_var.get() or "-"
                return True

        for handler in logging.root.handlers:
            handler.addFilter(RunIdFilter())

    @cached_property
    def run_id_context_var(self):
        return ContextVar("run_id", default=None)

    @cached_property
    def config(self) -> Config:
        return Config()

    @cached_property
    def fit_config(self) -> FitConfig:
        return FitConfig.from_config(self.config)

    @cached_property
    def report_archive(self) -> ReportArchive | None:
        if not self.config.archive_path:
            return None
        return ReportArchive(self.config.archive_path)

    @cached_property
    def bench_runner(self) -> BenchRunner:
        return BenchRunner(
            run_id_context_var=self.run_id_context_var,
            archive=self.report_archive,
        )
