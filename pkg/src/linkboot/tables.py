"""Record tables and linked datasets.

A RecordTable is a small column store read from CSV (header row required).
A LinkedDataset is the integrated sample produced by linking two tables:
record-pair indices plus their linkage weights, with the analysis columns
still living in the source tables.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class SchemaError(ValueError):
    """A referenced column is missing or ambiguous."""


def _parse_column(values: list[str]) -> np.ndarray:
    try:
        return np.array([float(v) for v in values], dtype=np.float64)
    except ValueError:
        return np.array(values, dtype=object)


@dataclass
class RecordTable:
    """Column-oriented table: numeric columns as float64, text as object."""

    columns: dict[str, np.ndarray]
    name: str = "table"

    def __post_init__(self) -> None:
        lengths = {len(v) for v in self.columns.values()}
        if len(lengths) > 1:
            raise ValueError(f"ragged columns in table {self.name!r}: {lengths}")

    @property
    def n(self) -> int:
        return len(next(iter(self.columns.values()))) if self.columns else 0

    @property
    def fields(self) -> list[str]:
        return list(self.columns)

    def column(self, name: str) -> np.ndarray:
        if name not in self.columns:
            raise SchemaError(f"column {name!r} not in table {self.name!r} "
                              f"(has {self.fields})")
        return self.columns[name]

    @classmethod
    def from_rows(cls, fields: list[str], rows: list[tuple], name: str = "table") -> "RecordTable":
        cols = {f: _parse_column([str(r[i]) for r in rows]) for i, f in enumerate(fields)}
        return cls(cols, name=name)

    @classmethod
    def from_csv(cls, path: str | Path, name: str | None = None) -> "RecordTable":
        path = Path(path)
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise ValueError(f"{path}: empty CSV, a header row is required") from None
            rows = [row for row in reader if row]
        if not rows:
            raise ValueError(f"{path}: no data rows")
        cols = {h.strip(): _parse_column([row[i] for row in rows])
                for i, h in enumerate(header)}
        return cls(cols, name=name or path.stem)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.fields)
            for i in range(self.n):
                writer.writerow([self.columns[f][i] for f in self.fields])


@dataclass
class LinkedDataset:
    """Linked record pairs (indexA, indexB) with their linkage weights.

    Under 1-1 linking no source index appears twice; `column` resolves an
    analysis variable against table A first, then table B, and refuses
    names present in both.
    """

    table_a: RecordTable
    table_b: RecordTable
    pairs: np.ndarray            # (n_links, 2) int64: [:, 0] into A, [:, 1] into B
    weights: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        self.pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        if self.weights is None:
            self.weights = np.zeros(len(self.pairs))
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if len(self.weights) != len(self.pairs):
            raise ValueError("weights and pairs length mismatch")
        n = min(self.table_a.n, self.table_b.n)
        if len(self.pairs) > n:
            raise ValueError(f"{len(self.pairs)} pairs exceeds min(n_A, n_B) = {n}")

    @property
    def n(self) -> int:
        return len(self.pairs)

    def source_of(self, name: str) -> str:
        in_a = name in self.table_a.columns
        in_b = name in self.table_b.columns
        if in_a and in_b:
            raise SchemaError(f"column {name!r} exists in both sources; rename one")
        if not in_a and not in_b:
            raise SchemaError(f"column {name!r} not found in either source")
        return "A" if in_a else "B"

    def column(self, name: str) -> np.ndarray:
        if self.source_of(name) == "A":
            return self.table_a.column(name)[self.pairs[:, 0]]
        return self.table_b.column(name)[self.pairs[:, 1]]

    def replaced(self, pairs: np.ndarray, weights: np.ndarray | None = None) -> "LinkedDataset":
        """Same sources, different pairing (used by bootstrap relinks)."""
        return LinkedDataset(self.table_a, self.table_b, pairs, weights)

    def to_csv(self, path: str | Path, analysis_fields: list[str] | None = None) -> None:
        fields = analysis_fields or []
        cols = {f: self.column(f) for f in fields}
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["indexA", "indexB", "weight", *fields])
            for r in range(self.n):
                writer.writerow([self.pairs[r, 0], self.pairs[r, 1], repr(self.weights[r]),
                                 *[cols[f][r] for f in fields]])

    @classmethod
    def from_csv(cls, path: str | Path, table_a: RecordTable, table_b: RecordTable) -> "LinkedDataset":
        body = RecordTable.from_csv(path)
        pairs = np.stack([body.column("indexA").astype(np.int64),
                          body.column("indexB").astype(np.int64)], axis=1)
        return cls(table_a, table_b, pairs, body.column("weight"))
