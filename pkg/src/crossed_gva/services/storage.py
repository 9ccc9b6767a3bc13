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
Long-format CSV ingestion and emission plus JSON reports.

CSV layout: UTF-8, header `row,col,y,x1[,x2,...]`, one line per cell, 1-based row and
column ids, no missing cells. Floats are written with 17 significant digits so a
written dataset reads back bit-equal.
"""

from __future__ import annotations

import json
import logging
import re
import sys
from dataclasses import dataclass
from itertools import islice
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from crossed_gva.domain import Dataset
from crossed_gva.family import Family, ResponseDomainError, check_response
from crossed_gva.services.simulator import TruthRecord

logger = logging.getLogger("storage")

_COVARIATE_RX = re.compile(r"^x(?P<index>[1-9][0-9]*)$")
MAX_REPORTED = 20


@dataclass
class DataFormatError(Exception):
    messages: list[str]

    def __str__(self) -> str:
        shown = self.messages[:MAX_REPORTED]
        more = len(self.messages) - len(shown)
        suffix = f"\n... and {more} more" if more > 0 else ""
        return "invalid data file:\n" + "\n".join(shown) + suffix


def _line(index: int) -> int:
    # header is line 1
    return index + 2


def _covariate_columns(columns: list[str]) -> list[str]:
    covariates = [c for c in columns if _COVARIATE_RX.match(c)]
    expected = [f"x{k}" for k in range(1, len(covariates) + 1)]
    if sorted(covariates, key=lambda c: int(c[1:])) != expected:
        raise DataFormatError([f"line 1: covariate columns must be x1..xp without gaps, got {covariates}"])
    return expected


def _to_float(raw: Any) -> float:
    try:
        value = float(raw)
    except (TypeError, ValueError):
        return float("nan")
    return value if np.isfinite(value) else float("nan")


def _numeric(frame: pd.DataFrame, columns: list[str], errors: list[str]) -> pd.DataFrame:
    # float() is correctly rounded, so 17-digit values read back bit-equal
    numeric = pd.DataFrame({c: [_to_float(v) for v in frame[c]] for c in columns}, index=frame.index)
    for column in columns:
        for index in frame.index[numeric[column].isna()]:
            raw = frame.at[index, column]
            problem = "missing value" if pd.isna(raw) or str(raw).strip() == "" else f"non-numeric value {raw!r}"
            errors.append(f"line {_line(index)}: {problem} in column {column!r}")
    return numeric


def read_dataset(path: Path | str, family: Family, scale: float | None = None) -> Dataset:
    """Read a long-format CSV into a complete grid; every problem is reported with its line number."""
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, na_values=[""], encoding="utf-8")
    except (OSError, UnicodeDecodeError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise DataFormatError([f"{path}: {e}"]) from e

    frame.columns = [c.strip() for c in frame.columns]
    missing = [c for c in ("row", "col", "y") if c not in frame.columns]
    if missing:
        raise DataFormatError([f"line 1: missing column {c!r}" for c in missing])
    covariates = _covariate_columns(list(frame.columns))
    if frame.empty:
        raise DataFormatError([f"{path}: no data lines"])

    errors: list[str] = []
    numeric = _numeric(frame, ["row", "col", "y", *covariates], errors)
    for column in ("row", "col"):
        ids = numeric[column]
        bad = ids.notna() & ((ids < 1) | (ids != np.floor(ids)))
        errors += [f"line {_line(i)}: {column} id {frame.at[i, column]!r} is not a positive integer" for i in frame.index[bad]]
    if errors:
        raise DataFormatError(errors)

    rows = numeric["row"].astype(np.int64).to_numpy()
    cols = numeric["col"].astype(np.int64).to_numpy()
    first_seen: dict[tuple[int, int], int] = {}
    for index, key in enumerate(zip(rows.tolist(), cols.tolist())):
        if key in first_seen:
            errors.append(
                f"line {_line(index)}: duplicate cell (row={key[0]}, col={key[1]}), first seen on line {_line(first_seen[key])}"
            )
        else:
            first_seen[key] = index

    m, n = int(rows.max()), int(cols.max())
    absent = m * n - len(first_seen)
    if absent:
        # enumerates at most MAX_REPORTED absent cells
        cells = ((i, j) for i in range(1, m + 1) for j in range(1, n + 1) if (i, j) not in first_seen)
        errors += [f"missing cell (row={i}, col={j}) in a {m}×{n} grid" for i, j in islice(cells, MAX_REPORTED)]
        if absent > MAX_REPORTED:
            errors.append(f"{absent} of {m * n} cells missing in a {m}×{n} grid")

    y_values = numeric["y"].to_numpy()
    for index, value in enumerate(y_values):
        try:
            check_response(family, value)
        except ResponseDomainError as e:
            errors.append(f"line {_line(index)}: y={frame.at[index, 'y']} is invalid ({e.detail})")
    if errors:
        raise DataFormatError(errors)

    y = np.empty((m, n))
    x = np.empty((m, n, len(covariates)))
    y[rows - 1, cols - 1] = y_values
    x[rows - 1, cols - 1, :] = numeric[covariates].to_numpy(dtype=np.float64).reshape(len(frame), len(covariates))
    data = Dataset(y=y, x=x, family=family)
    logger.info("read %d×%d %s grid with %d covariates from %s", m, n, family.name, data.p, path)
    return data.scaled(scale) if scale is not None else data


def write_dataset(data: Dataset, path: Path | str) -> None:
    path = Path(path)
    rows, cols = np.meshgrid(np.arange(1, data.m + 1), np.arange(1, data.n + 1), indexing="ij")
    frame = pd.DataFrame({"row": rows.ravel(), "col": cols.ravel(), "y": data.y.ravel()})
    for k in range(data.p):
        frame[f"x{k + 1}"] = data.x[:, :, k].ravel()
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.17g", lineterminator="\n", encoding="utf-8")
    logger.info("wrote %d cells to %s", len(frame), path)


def _jsonable(value: Any):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"{type(value).__name__} is not JSON serializable")


def dumps(payload: dict[str, Any]) -> str:
    return json.dumps(payload, indent=2, default=_jsonable, ensure_ascii=False) + "\n"


def write_json(payload: dict[str, Any], path: Path | None = None) -> None:
    """Write a report to `path`, or to stdout when no path is given. Key order is preserved."""
    text = dumps(payload)
    if path is None:
        sys.stdout.write(text)
        return
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    logger.info("wrote %s", path)


def read_truth(path: Path) -> TruthRecord:
    try:
        return TruthRecord.model_validate_json(path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as e:
        raise DataFormatError([f"{path}: cannot read truth record ({e})"]) from e
