import logging

import pytest

from crossed_gva.application_context import ApplicationContext
from crossed_gva.config import Config
from crossed_gva.utils.validation import parse_name_list


def test_config_reads_environment(monkeypatch):
    monkeypatch.setenv("CRGVA_EXP_CAP", "50")
    monkeypatch.setenv("CRGVA_ARCHIVE_PATH", "")
    config = Config()
    assert config.exp_cap == 50.0
    assert config.archive_path == ""
    assert config.logging_config["loggers"]["optimizer"]["level"] == "INFO"


def test_context_builds_the_fit_config_from_the_environment(monkeypatch):
    monkeypatch.setenv("CRGVA_MAX_ITERS", "42")
    monkeypatch.setenv("CRGVA_FIT_RESTARTS", "2")
    ctx = ApplicationContext()
    assert ctx.fit_config.max_iters == 42
    assert ctx.fit_config.restarts == 2
    assert ctx.report_archive is None
    assert ctx.bench_runner.run_id_context_var is ctx.run_id_context_var


def test_context_opens_the_archive(monkeypatch, tmp_path):
    monkeypatch.setenv("CRGVA_ARCHIVE_PATH", str(tmp_path / "reports.db"))
    ctx = ApplicationContext()
    assert ctx.bench_runner.archive is ctx.report_archive
    assert ctx.report_archive.list_reports() == []
    ctx.report_archive.close()


def test_log_records_carry_the_run_id():
    ctx = ApplicationContext()
    record = logging.LogRecord("optimizer", logging.INFO, __file__, 1, "converged", None, None)
    handler = next(h for h in logging.root.handlers if h.filters)

    handler.filter(record)
    assert record.run_id == "-"

    token = ctx.run_id_context_var.set("fit")
    try:
        handler.filter(record)
        assert record.run_id == "fit"
        assert handler.format(record) == "[INFO] [fit] optimizer: converged"
    finally:
        ctx.run_id_context_var.reset(token)


@pytest.mark.parametrize(
    "raw, expected",
    [
        ("gva, GVACL,gva", ["gva", "gvacl"]),
        ("gvacl", ["gvacl"]),
        ("full_gva,gvacl", ["full_gva", "gvacl"]),
        ("", []),
        (None, []),
    ],
)
def test_parse_name_list(raw, expected):
    assert parse_name_list(raw) == expected


@pytest.mark.parametrize("raw", ["gva;gvacl", "gva,,gvacl", "gva,", "gva 2"])
def test_parse_name_list_rejects_malformed_lists(raw):
    with pytest.raises(ValueError):
        parse_name_list(raw)
