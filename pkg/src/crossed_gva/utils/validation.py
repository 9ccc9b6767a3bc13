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
from typing import Annotated

try:
    from typing import TypeAliasType
except ImportError:  # Python < 3.12
    from typing_extensions import TypeAliasType

import re
from pydantic import Field

NodeCount = TypeAliasType("NodeCount", Annotated[int, Field(ge=1, le=100)])
Seed = TypeAliasType("Seed", Annotated[int, Field(ge=0, lt=2**64)])

_NAME_LIST_RX = re.compile(r"^\s*(?P<first>[a-z_]+)(\s*,\s*[a-z_]+)*\s*$", re.I)


def parse_name_list(spec: str | None) -> list[str]:
    """'gva, GVACL,gva' -> ['gva', 'gvacl'], order kept, duplicates dropped."""
    if not spec:
        return []

    if not _NAME_LIST_RX.fullmatch(spec):
        raise ValueError(f"Unsupported name list: {spec!r}")

    names: list[str] = []
    for name in spec.split(","):
        name = name.strip().lower()
        if name not in names:
            names.append(name)
    return names
