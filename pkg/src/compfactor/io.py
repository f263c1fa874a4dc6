"""CSV and JSON readers/writers shared by the CLI and the experiment harness."""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np


class ParseError(ValueError):
    """Malformed tabular input; the message carries the 1-based line number."""


def read_table(path: str | Path, allow_missing: bool = False) -> tuple[list[str], np.ndarray]:
    """Parse a header + numeric body CSV. Empty cells become NaN when allowed."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if not header or any(not h for h in header):
            raise ParseError(f"{path}:1: blank column name")
        if len(set(header)) != len(header):
            raise ParseError(f"{path}:1: duplicate column names")
        rows: list[list[float]] = []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(header):
                raise ParseError(f"{path}:{lineno}: expected {len(header)} fields, got {len(rec)}")
            vals = []
            for cell in rec:
                cell = cell.strip()
                if cell == "":
                    if not allow_missing:
                        raise ParseError(f"{path}:{lineno}: missing value")
                    vals.append(math.nan)
                    continue
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise ParseError(f"{path}:{lineno}: non-numeric cell {cell!r}") from None
            rows.append(vals)
    body = np.array(rows, dtype=float).reshape(len(rows), len(header))
    return header, body


def write_table(path: str | Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(list(header))
        for row in rows:
            w.writerow([_cell(v) for v in row])


def _cell(v: Any) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (float, np.floating)):
        return "" if math.isnan(v) else repr(float(v))
    if v is None:
        return ""
    return str(v)


def to_jsonable(obj: Any) -> Any:
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (np.floating,)):
        obj = float(obj)
    if isinstance(obj, float):
        if math.isnan(obj):
            return None
        if math.isinf(obj):
            return "inf" if obj > 0 else "-inf"
        return obj
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, Mapping):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    return obj


def write_json(path: str | Path, payload: Any) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(to_jsonable(payload), fh, indent=2, sort_keys=True, ensure_ascii=False)
        fh.write("\n")


def read_json(path: str | Path) -> Any:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)
