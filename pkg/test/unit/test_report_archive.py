import pytest

from crossed_gva.services.bench import BenchReport
from crossed_gva.utils.report_archive import ReportArchive


def _report(family: str, m: int = 10) -> BenchReport:
    return BenchReport(
        family=family,
        alpha=0.8 if family == "gamma" else None,
        m=m,
        n=m,
        reps=5,
        seed=0,
        methods={},
    )


@pytest.fixture
def archive(tmp_path):
    archive = ReportArchive(tmp_path / "archive" / "reports.db")
    yield archive
    archive.close()


def test_register_and_get(archive):
    report_id = archive.register(_report("gamma"))
    stored = archive.get(report_id)
    assert stored["report_id"] == report_id
    assert stored["report"]["alpha"] == 0.8
    assert BenchReport.model_validate(stored["report"]) == _report("gamma")


def test_list_filters_by_family(archive):
    ids = {archive.register(_report(family, m)) for family, m in [("poisson", 10), ("gamma", 20), ("poisson", 30)]}
    assert {r["report_id"] for r in archive.list_reports()} == ids
    poisson = archive.list_reports(family="poisson")
    assert sorted(r["m"] for r in poisson) == [10, 30]
    assert archive.list_reports(family="logistic") == []


def test_unknown_report(archive):
    with pytest.raises(KeyError):
        archive.get("0" * 16)


def test_archive_survives_reopening(tmp_path):
    path = tmp_path / "reports.db"
    first = ReportArchive(path)
    report_id = first.register(_report("poisson"))
    first.close()

    second = ReportArchive(path)
    assert second.get(report_id)["report"]["family"] == "poisson"
    second.close()
