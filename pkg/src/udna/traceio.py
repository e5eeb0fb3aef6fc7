"""Trace CSV and JSON summary files."""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .engine import EXTRA_COLUMNS, TRACE_COLUMNS

__all__ = ["SCHEMA_VERSION", "TraceSchemaError", "read_trace", "write_json", "write_trace"]

SCHEMA_VERSION = 1
_MAGIC = "# udna-trace"
COLUMNS = TRACE_COLUMNS + EXTRA_COLUMNS


class TraceSchemaError(ValueError):
    pass


def write_trace(path, records) -> None:
    """Versioned CSV: one comment line, the header, then one row per record."""
    with open(path, "w", newline="") as fh:
        fh.write(f"{_MAGIC} v{SCHEMA_VERSION}\n")
        w = csv.writer(fh)
        w.writerow(COLUMNS)
        for r in records:
            w.writerow([repr(float(v)) if isinstance(v, float) else v for v in r.row()])


def read_trace(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        first = fh.readline().strip()
        if not first.startswith(_MAGIC):
            raise TraceSchemaError("missing trace version line; not a udna trace")
        version = first[len(_MAGIC):].strip()
        if version != f"v{SCHEMA_VERSION}":
            raise TraceSchemaError(f"trace schema {version} is not supported (expected v{SCHEMA_VERSION})")
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise TraceSchemaError("trace has no header")
        missing = [c for c in COLUMNS if c not in header]
        if missing:
            raise TraceSchemaError(f"trace is missing column '{missing[0]}'")
        rows = [row for row in reader if row]
    idx = {c: header.index(c) for c in COLUMNS}
    return {c: np.array([float(row[i]) for row in rows]) for c, i in idx.items()}


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        obj = obj.item()
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, float) and not math.isfinite(obj):
        return None if math.isnan(obj) else ("inf" if obj > 0 else "-inf")
    return obj


def write_json(path, doc) -> None:
    Path(path).write_text(json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n")
