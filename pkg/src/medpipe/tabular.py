"""Column-oriented table shared by every stage of the pipeline.

Cells are kept as raw strings after parsing (masking must be byte-exact);
preprocessing replaces them with floats. ``None`` marks a missing value.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

from .errors import DuplicateHeader, EmptyTable, RaggedRows

Cell = str | float | None


def format_cell(value) -> str:
    """Canonical string rendering used for CSV output and digests."""
    if value is None:
        return ""
    if isinstance(value, float):
        if value == int(value) and abs(value) < 1e15:
            return str(int(value))
        return repr(value)
    return str(value)


@dataclass
class TabularDataset:
    """Ordered headers plus equal-length columns of cells."""

    headers: list[str]
    columns: dict[str, list] = field(default_factory=dict)

    def __post_init__(self):
        if not self.headers:
            raise EmptyTable("a dataset needs at least one column")
        if len(set(self.headers)) != len(self.headers):
            dupes = sorted({h for h in self.headers if self.headers.count(h) > 1})
            raise DuplicateHeader(f"duplicate column names: {dupes}")
        if set(self.columns) != set(self.headers):
            raise EmptyTable("columns do not match declared headers")
        lengths = {len(v) for v in self.columns.values()}
        if len(lengths) > 1:
            raise EmptyTable(f"columns have differing lengths: {sorted(lengths)}")

    @classmethod
    def from_rows(cls, headers: list[str], rows: list[list]) -> "TabularDataset":
        columns: dict[str, list] = {h: [] for h in headers}
        if len(columns) != len(headers):
            raise DuplicateHeader(f"duplicate column names: {sorted(headers)}")
        for row in rows:
            if len(row) != len(headers):
                raise RaggedRows(
                    f"row arity {len(row)} does not match {len(headers)} headers"
                )
            for h, v in zip(headers, row):
                columns[h].append(v)
        return cls(headers=list(headers), columns=columns)

    @property
    def n_rows(self) -> int:
        if not self.headers:
            return 0
        return len(self.columns[self.headers[0]])

    @property
    def n_cols(self) -> int:
        return len(self.headers)

    def column(self, name: str) -> list:
        return self.columns[name]

    def row(self, i: int) -> list:
        return [self.columns[h][i] for h in self.headers]

    def rows(self) -> list[list]:
        return [self.row(i) for i in range(self.n_rows)]

    def select(self, names: list[str], renames: "dict[str, str] | None" = None) -> "TabularDataset":
        """New dataset with the given columns, optionally renamed, in order."""
        renames = renames or {}
        headers = [renames.get(n, n) for n in names]
        columns = {renames.get(n, n): list(self.columns[n]) for n in names}
        return TabularDataset(headers=headers, columns=columns)

    def copy(self) -> "TabularDataset":
        return TabularDataset(
            headers=list(self.headers),
            columns={h: list(v) for h, v in self.columns.items()},
        )

    def to_csv(self) -> str:
        """RFC 4180 serialization with LF line endings (deterministic bytes)."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.headers)
        for i in range(self.n_rows):
            writer.writerow([format_cell(v) for v in self.row(i)])
        return buf.getvalue()

    def __eq__(self, other) -> bool:
        if not isinstance(other, TabularDataset):
            return NotImplemented
        return self.headers == other.headers and self.columns == other.columns
