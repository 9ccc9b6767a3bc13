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

import json
import logging
import secrets
import sqlite3
from datetime import datetime
from pathlib import Path
from typing import TYPE_CHECKING

if TYPE_CHECKING:
    from crossed_gva.services.bench import BenchReport

logger = logging.getLogger("report_archive")


class ReportArchive:
    """
    SQLite store of benchmark reports, one row per report with the full JSON payload.
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._conn = sqlite3.connect(self.path, check_same_thread=False, isolation_level=None)
        self._conn.execute("PRAGMA journal_mode=WAL;")
        self._conn.execute("""
            CREATE TABLE IF NOT EXISTS reports (
                report_id   TEXT PRIMARY KEY,
                created_at  TEXT NOT NULL,  -- ISO formatted date
                family      TEXT NOT NULL,
                m           INTEGER NOT NULL,
                n           INTEGER NOT NULL,
                reps        INTEGER NOT NULL,
                payload     TEXT NOT NULL   -- report JSON
            );
        """)

    def register(self, report: BenchReport) -> str:
        report_id = secrets.token_hex(8)
        self._conn.execute(
            """
            INSERT INTO reports (report_id, created_at, family, m, n, reps, payload)
            VALUES (?,?,?,?,?,?,?);
            """,
            (
                report_id,
                datetime.now().isoformat(),
                report.family,
                report.m,
                report.n,
                report.reps,
                report.model_dump_json(),
            ),
        )
        logger.info("Registered report %s (%s %dx%d, %d reps)", report_id, report.family, report.m, report.n, report.reps)
        return report_id

    def get(self, report_id: str) -> dict:
        row = self._conn.execute(
            "SELECT created_at, payload FROM reports WHERE report_id = ?;", (report_id,)
        ).fetchone()
        if row is None:
            raise KeyError(f"Report {report_id} not found")
        created_at, payload = row
        return {"report_id": report_id, "created_at": created_at, "report": json.loads(payload)}

    def list_reports(self, family: str | None = None) -> list[dict]:
        query = "SELECT report_id, created_at, family, m, n, reps FROM reports"
        params: tuple = ()
        if family is not None:
            query += " WHERE family = ?"
            params = (family,)
        rows = self._conn.execute(query + " ORDER BY created_at, report_id;", params).fetchall()
        return [
            {"report_id": r[0], "created_at": r[1], "family": r[2], "m": r[3], "n": r[4], "reps": r[5]}
            for r in rows
        ]

    def close(self) -> None:
        self._conn.close()
