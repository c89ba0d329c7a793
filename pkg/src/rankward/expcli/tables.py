"""CSV result tables with a commented provenance header.

Floats are written with ``repr`` so every number round-trips exactly; the
header lines (``#``-prefixed) carry the config hash, a timestamp and
library versions.
"""
from __future__ import annotations

import csv
import io
import platform
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

import numpy as np

from .. import __version__


@dataclass
class ResultTable:
    name: str
    columns: tuple[str, ...]
    rows: list[tuple] = field(default_factory=list)

    def add(self, *values) -> None:
        if len(values) != len(self.columns):
            raise ValueError(f"{self.name}: expected {len(self.columns)} values, got {len(values)}")
        self.rows.append(tuple(values))

    def column(self, name: str) -> list:
        i = self.columns.index(name)
        return [r[i] for r in self.rows]

    def records(self) -> list[dict[str, Any]]:
        return [dict(zip(self.columns, r)) for r in self.rows]

    def __len__(self) -> int:
        return len(self.rows)


def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (tuple, list)):
        return " ".join(_cell(x) for x in v)
    return "" if v is None else str(v)


def provenance(config_hash: str) -> list[str]:
    return [
        f"config_hash: {config_hash}",
        f"created: {datetime.now(timezone.utc).isoformat(timespec='seconds')}",
        f"versions: rankward={__version__} numpy={np.__version__} python={platform.python_version()}",
    ]


def table_to_csv(table: ResultTable, config_hash: str) -> str:
    buf = io.StringIO()
    buf.write(f"# table: {table.name}\n")
    for line in provenance(config_hash):
        buf.write(f"# {line}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(table.columns)
    for r in table.rows:
        w.writerow([_cell(v) for v in r])
    return buf.getvalue()


def write_table(path, table: ResultTable, config_hash: str) -> Path:
    path = Path(path)
    path.write_text(table_to_csv(table, config_hash), encoding="utf-8")
    return path


def read_table(path) -> tuple[dict[str, str], list[dict[str, str]]]:
    """Header fields and rows (as strings) of a table written by :func:`write_table`."""
    header: dict[str, str] = {}
    body = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition(": ")
            header[key] = value
        else:
            body.append(line)
    rows = list(csv.DictReader(body))
    return header, rows


def numeric_body(path) -> str:
    """The file without its provenance header: what reruns must reproduce exactly."""
    return "\n".join(ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if not ln.startswith("# created:"))
