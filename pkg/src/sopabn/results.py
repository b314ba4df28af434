"""Result tables and their CSV / JSON serialization."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


def _cell(value):
    # repr of a Python float is the shortest round-tripping form, so files are stable
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if math.isnan(value):
            return "nan"
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return repr(value)
    if value is None:
        return ""
    return str(value)


def _json_value(value):
    if isinstance(value, (np.bool_,)):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else None
    if isinstance(value, (list, tuple)):
        return [_json_value(v) for v in value]
    if isinstance(value, dict):
        return {str(k): _json_value(v) for k, v in value.items()}
    return value


@dataclass
class Table:
    """Named rectangular table with run metadata.

    Every CSV row repeats ``seed`` and ``config_hash`` so that any single
    file is enough to reproduce the run.
    """

    name: str
    columns: list[str]
    rows: list[list] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def add(self, *values) -> None:
        if len(values) != len(self.columns):
            raise ValueError(f"row has {len(values)} values for {len(self.columns)} columns")
        self.rows.append(list(values))

    def column(self, name: str) -> list:
        k = self.columns.index(name)
        return [row[k] for row in self.rows]

    def records(self) -> list[dict]:
        return [dict(zip(self.columns, row)) for row in self.rows]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n", quoting=csv.QUOTE_MINIMAL)
        writer.writerow(["seed", "config_hash"] + self.columns)
        seed, digest = self.metadata.get("seed", ""), self.metadata.get("config_hash", "")
        for row in self.rows:
            writer.writerow([_cell(seed), digest] + [_cell(v) for v in row])
        return buf.getvalue()

    def to_json(self, extra: dict | None = None) -> str:
        doc = {"name": self.name, "metadata": _json_value({**self.metadata, **(extra or {})}),
               "columns": self.columns, "rows": [_json_value(r) for r in self.rows]}
        return json.dumps(doc, indent=2, sort_keys=False) + "\n"


def write_tables(tables: list[Table], out_dir, fmt: str = "both", extra: dict | None = None) -> list[Path]:
    """Write ``<name>.csv`` and/or ``<name>.json`` for each table; returns the paths."""
    if fmt not in ("csv", "json", "both"):
        raise ValueError(f"unknown format {fmt!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for table in tables:
        if fmt in ("csv", "both"):
            p = out / f"{table.name}.csv"
            p.write_bytes(table.to_csv().encode("utf-8"))
            paths.append(p)
        if fmt in ("json", "both"):
            p = out / f"{table.name}.json"
            p.write_bytes(table.to_json(extra).encode("utf-8"))
            paths.append(p)
    return paths
