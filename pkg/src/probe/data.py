"""Column-typed sample tables and CSV ingestion."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from probe.errors import DataError

NUMERIC = "numeric"
CATEGORICAL = "categorical"


@dataclass(frozen=True)
class Dataset:
    """Named columns of equal length.

    Numeric columns are float64 arrays, categorical columns are object arrays
    holding the raw labels.
    """

    columns: dict
    kinds: dict

    def __post_init__(self):
        lengths = {len(v) for v in self.columns.values()}
        if len(lengths) > 1:
            raise DataError(f"columns have unequal lengths {sorted(lengths)}")
        for name in self.columns:
            if self.kinds.get(name) not in (NUMERIC, CATEGORICAL):
                raise DataError(f"column {name!r} has no valid kind")

    @classmethod
    def from_columns(cls, kinds: dict | None = None, **columns) -> "Dataset":
        kinds = dict(kinds or {})
        cols = {}
        for name, values in columns.items():
            kind = kinds.get(name) or _infer_kind(values)
            kinds[name] = kind
            if kind == NUMERIC:
                arr = np.asarray(values, dtype=float).reshape(-1)
                if not np.all(np.isfinite(arr)):
                    raise DataError(f"column {name!r} contains NaN or infinite values")
            else:
                arr = np.empty(len(values), dtype=object)
                arr[:] = list(values)
            cols[name] = arr
        return cls(cols, kinds)

    @property
    def names(self) -> list[str]:
        return list(self.columns)

    def __len__(self) -> int:
        return len(next(iter(self.columns.values()))) if self.columns else 0

    def column(self, name: str) -> np.ndarray:
        try:
            return self.columns[name]
        except KeyError:
            raise DataError(f"missing column {name!r}; have {self.names}") from None

    def numeric(self, names=None) -> np.ndarray:
        """Stack numeric columns into an (N, k) float array."""
        names = self.numeric_names() if names is None else list(names)
        for name in names:
            if self.kinds.get(name) != NUMERIC:
                raise DataError(f"column {name!r} is not numeric")
        if not names:
            raise DataError("no numeric columns selected")
        return np.column_stack([self.column(n) for n in names])

    def numeric_names(self):
        return [n for n in self.names if self.kinds[n] == NUMERIC]

    def select(self, names) -> "Dataset":
        names = list(names)
        return Dataset({n: self.column(n) for n in names}, {n: self.kinds[n] for n in names})

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.names)
            for i in range(len(self)):
                writer.writerow([_cell(self.columns[n][i], self.kinds[n]) for n in self.names])


def _cell(v, kind):
    return repr(float(v)) if kind == NUMERIC else str(v)


def _infer_kind(values) -> str:
    arr = np.asarray(values)
    return NUMERIC if arr.dtype.kind in "fiub" else CATEGORICAL


def ingest_csv(path, schema: dict | None = None) -> Dataset:
    """Read a UTF-8 CSV with a header row.

    ``schema`` maps column name to ``"numeric"`` or ``"categorical"``; columns
    it omits are numeric.  Empty and NaN cells are rejected with their file
    line number and column name.
    """
    path = Path(path)
    schema = dict(schema or {})
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file, expected a header row") from None
        except UnicodeDecodeError:
            raise DataError(f"{path}: not valid UTF-8") from None
        header = [h.strip() for h in header]
        if len(set(header)) != len(header) or not all(header):
            raise DataError(f"{path}: header has empty or duplicate names")
        unknown = set(schema) - set(header)
        if unknown:
            raise DataError(f"{path}: schema names missing columns {sorted(unknown)}")
        kinds = {h: schema.get(h, NUMERIC) for h in header}
        for h, k in kinds.items():
            if k not in (NUMERIC, CATEGORICAL):
                raise DataError(f"column {h!r}: unknown kind {k!r}")
        raw = {h: [] for h in header}
        try:
            for row in reader:
                line = reader.line_num
                if not row or all(not c.strip() for c in row):
                    continue
                if len(row) != len(header):
                    raise DataError(
                        f"{path}: malformed row at line {line}: expected {len(header)} "
                        f"fields, got {len(row)}")
                for h, cell in zip(header, row):
                    raw[h].append(_parse(cell.strip(), kinds[h], line, h))
        except UnicodeDecodeError:
            raise DataError(f"{path}: not valid UTF-8") from None
    cols = {}
    for h in header:
        if kinds[h] == NUMERIC:
            cols[h] = np.asarray(raw[h], dtype=float)
        else:
            arr = np.empty(len(raw[h]), dtype=object)
            arr[:] = raw[h]
            cols[h] = arr
    return Dataset(cols, kinds)


def _parse(cell: str, kind: str, line: int, column: str):
    if cell == "":
        raise DataError(f"empty cell at row {line}, column {column}")
    if kind == CATEGORICAL:
        return cell
    try:
        value = float(cell)
    except ValueError:
        raise DataError(f"non-numeric value {cell!r} at row {line}, column {column}") from None
    if not math.isfinite(value):
        raise DataError(f"non-finite value {cell!r} at row {line}, column {column}")
    return value
