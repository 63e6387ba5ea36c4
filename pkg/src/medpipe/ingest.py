"""Content-based file classification and tabular parsing.

Detection never looks at file names or extensions: magic bytes first, then
container inspection, then structural probes (JSON before CSV). Archives are
unpacked fully in memory.
"""

from __future__ import annotations

import csv
import io
import json
import re
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from xml.etree import ElementTree

from .errors import (
    CorruptArchive,
    DepthExceeded,
    EmptyTable,
    RaggedRows,
    UnsupportedSheet,
    ZipBomb,
)
from .tabular import TabularDataset, format_cell

MIME_CSV = "text/csv"
MIME_JSON = "application/json"
MIME_XLSX = "application/vnd.openxmlformats-officedocument.spreadsheetml.sheet"
MIME_ZIP = "application/zip"
MIME_PNG = "image/png"
MIME_JPEG = "image/jpeg"
MIME_UNKNOWN = "application/octet-stream"

TABULAR_MIMES = frozenset({MIME_CSV, MIME_JSON, MIME_XLSX})
IMAGE_MIMES = frozenset({MIME_PNG, MIME_JPEG})

DEFAULT_MAX_ARCHIVE_DEPTH = 8
DEFAULT_UNPACK_LIMIT = 1 << 30  # 1 GiB cumulative uncompressed

_PNG_MAGIC = b"\x89PNG\r\n\x1a\n"
_JPEG_MAGIC = b"\xff\xd8\xff"
_ZIP_MAGIC = b"PK\x03\x04"
_ZIP_EMPTY_MAGIC = b"PK\x05\x06"  # archive holding zero entries

_CSV_DELIMITERS = (",", ";", "\t")
_CSV_SAMPLE_ROWS = 50
_CSV_CONSISTENT_FRACTION = 0.90


@dataclass
class FileArtifact:
    """A named byte buffer with its detected MIME and archive nesting depth."""

    name: str
    data: bytes
    mime: str | None = None
    depth: int = 0


@dataclass
class TypeSummary:
    """Per-MIME counts for a classified batch; octet-stream counts as unknown."""

    entries: dict[str, int] = field(default_factory=dict)
    unknown_count: int = 0

    @property
    def total(self) -> int:
        return sum(self.entries.values()) + self.unknown_count


def load_artifact(path: str | Path) -> FileArtifact:
    p = Path(path)
    return FileArtifact(name=p.name, data=p.read_bytes())


def detect_mime(artifact: FileArtifact) -> str:
    """Classify by content only; unrecognized content maps to octet-stream."""
    if not artifact.data:
        raise ValueError("detect_mime requires non-empty bytes")
    return sniff_bytes(artifact.data)


def sniff_bytes(data: bytes) -> str:
    if data.startswith(_PNG_MAGIC):
        return MIME_PNG
    if data.startswith(_JPEG_MAGIC):
        return MIME_JPEG
    if data.startswith(_ZIP_MAGIC):
        # XLSX is a ZIP whose directory carries the spreadsheet skeleton.
        return MIME_XLSX if _is_xlsx_container(data) else MIME_ZIP
    if data.startswith(_ZIP_EMPTY_MAGIC):
        return MIME_ZIP
    text = _decode_utf8(data)
    if text is None:
        return MIME_UNKNOWN
    if _is_json_document(text):
        return MIME_JSON
    if _sniff_csv_delimiter(text) is not None:
        return MIME_CSV
    return MIME_UNKNOWN


def _decode_utf8(data: bytes) -> str | None:
    try:
        return data.decode("utf-8")
    except UnicodeDecodeError:
        return None


def _is_json_document(text: str) -> bool:
    if not text.strip():
        return False
    try:
        json.loads(text)
    except (json.JSONDecodeError, RecursionError):
        return False
    return True


def _is_xlsx_container(data: bytes) -> bool:
    try:
        with zipfile.ZipFile(io.BytesIO(data)) as zf:
            names = zf.namelist()
    except (zipfile.BadZipFile, ValueError):
        return False
    return "[Content_Types].xml" in names and any(n.startswith("xl/") for n in names)


def _sniff_csv_delimiter(text: str) -> str | None:
    """Best delimiter among {comma, semicolon, tab}, or None if not CSV-like.

    A delimiter qualifies when the modal field count over sampled rows is at
    least 2 and covers >= 90% of rows; ties resolve toward the delimiter with
    more conforming rows, then candidate order.
    """
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if len(lines) < 2:
        return None
    sample = "\n".join(lines[:_CSV_SAMPLE_ROWS])
    best: tuple[int, int] | None = None  # (conforming rows, -candidate index)
    best_delim = None
    for idx, delim in enumerate(_CSV_DELIMITERS):
        try:
            rows = list(csv.reader(io.StringIO(sample), delimiter=delim))
        except csv.Error:
            continue
        arities = [len(r) for r in rows if r]
        if len(arities) < 2:
            continue
        modal = max(set(arities), key=arities.count)
        conforming = arities.count(modal)
        if modal < 2 or conforming / len(arities) < _CSV_CONSISTENT_FRACTION:
            continue
        key = (conforming, -idx)
        if best is None or key > best:
            best = key
            best_delim = delim
    return best_delim


def unpack_recursive(
    artifact: FileArtifact,
    max_depth: int = DEFAULT_MAX_ARCHIVE_DEPTH,
    size_limit: int = DEFAULT_UNPACK_LIMIT,
) -> list[FileArtifact]:
    """Depth-first, in-memory enumeration of non-archive leaves of a ZIP.

    Nested ZIPs are descended into, never returned. Leaves come back in
    archive-entry order with mime detected and depth set.
    """
    budget = {"remaining": size_limit}
    return _unpack(artifact, depth=0, max_depth=max_depth, budget=budget)


def _unpack(
    artifact: FileArtifact, depth: int, max_depth: int, budget: dict
) -> list[FileArtifact]:
    if depth >= max_depth:
        raise DepthExceeded(
            f"archive {artifact.name!r} nested beyond max depth {max_depth}"
        )
    try:
        zf = zipfile.ZipFile(io.BytesIO(artifact.data))
    except (zipfile.BadZipFile, ValueError) as exc:
        raise CorruptArchive(f"cannot read {artifact.name!r}: {exc}") from exc
    leaves: list[FileArtifact] = []
    with zf:
        for info in zf.infolist():
            if info.is_dir():
                continue
            budget["remaining"] -= info.file_size
            if budget["remaining"] < 0:
                raise ZipBomb(
                    f"cumulative uncompressed size exceeds limit while reading "
                    f"{artifact.name!r}"
                )
            try:
                data = zf.read(info)
            except (zipfile.BadZipFile, NotImplementedError, ValueError) as exc:
                raise CorruptArchive(
                    f"cannot extract {info.filename!r} from {artifact.name!r}: {exc}"
                ) from exc
            if not data:
                continue
            name = f"{artifact.name}/{info.filename}"
            mime = sniff_bytes(data)
            child = FileArtifact(name=name, data=data, mime=mime, depth=depth + 1)
            if mime == MIME_ZIP:
                leaves.extend(_unpack(child, depth + 1, max_depth, budget))
            else:
                leaves.append(child)
    return leaves


def summarize_types(artifacts: list[FileArtifact]) -> TypeSummary:
    """Counts per distinct MIME, keyed in sorted order; unknowns tallied apart."""
    counts: dict[str, int] = {}
    unknown = 0
    for a in artifacts:
        if a.mime is None:
            raise ValueError(f"artifact {a.name!r} has no mime set")
        if a.mime == MIME_UNKNOWN:
            unknown += 1
        else:
            counts[a.mime] = counts.get(a.mime, 0) + 1
    return TypeSummary(entries=dict(sorted(counts.items())), unknown_count=unknown)


def parse_tabular(artifact: FileArtifact, ragged_tolerance: float = 0.0) -> TabularDataset:
    """Parse CSV / JSON array-of-objects / XLSX sheet 1 into a table."""
    if artifact.mime == MIME_CSV:
        return _parse_csv(artifact.data, ragged_tolerance)
    if artifact.mime == MIME_JSON:
        return _parse_json(artifact.data)
    if artifact.mime == MIME_XLSX:
        return _parse_xlsx(artifact.data)
    raise EmptyTable(f"unsupported tabular mime: {artifact.mime!r}")


def _parse_csv(data: bytes, ragged_tolerance: float) -> TabularDataset:
    text = _decode_utf8(data)
    if text is None:
        raise EmptyTable("CSV bytes are not valid UTF-8")
    delim = _sniff_csv_delimiter(text) or ","
    rows = [r for r in csv.reader(io.StringIO(text), delimiter=delim) if r]
    if len(rows) < 2:
        raise EmptyTable("CSV needs a header row and at least one data row")
    headers = rows[0]
    arity = len(headers)
    ragged = [i for i, r in enumerate(rows[1:], start=2) if len(r) != arity]
    if ragged and len(ragged) > ragged_tolerance * (len(rows) - 1):
        raise RaggedRows(
            f"{len(ragged)} rows differ from header arity {arity} "
            f"(first at line {ragged[0]})"
        )
    body = [r for r in rows[1:] if len(r) == arity]
    return TabularDataset.from_rows(headers, body)


def _render_json_value(value):
    if value is None:
        return None
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, str):
        return value
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return format_cell(value)
    return json.dumps(value, separators=(",", ":"))


def _parse_json(data: bytes) -> TabularDataset:
    text = _decode_utf8(data)
    if text is None:
        raise EmptyTable("JSON bytes are not valid UTF-8")
    doc = json.loads(text)
    if not isinstance(doc, list) or not doc:
        raise EmptyTable("JSON table must be a non-empty array of objects")
    if not all(isinstance(item, dict) for item in doc):
        raise EmptyTable("JSON table must contain only objects")
    headers: list[str] = []
    for item in doc:
        for key in item:
            if key not in headers:
                headers.append(key)
    rows = [[_render_json_value(item.get(h)) for h in headers] for item in doc]
    return TabularDataset.from_rows(headers, rows)


# --- XLSX (read-only, sheet 1, shared + inline strings) -----------------------

_XLSX_NS = "{http://schemas.openxmlformats.org/spreadsheetml/2006/main}"
_RELS_NS = "{http://schemas.openxmlformats.org/package/2006/relationships}"
_REL_ATTR = "{http://schemas.openxmlformats.org/officeDocument/2006/relationships}id"

_CELL_REF = re.compile(r"([A-Z]+)(\d+)")


def _col_index(ref: str) -> int | None:
    m = _CELL_REF.match(ref)
    if not m:
        return None
    idx = 0
    for ch in m.group(1):
        idx = idx * 26 + (ord(ch) - ord("A") + 1)
    return idx - 1


def _xlsx_number(raw: str) -> str:
    try:
        value = float(raw)
    except ValueError:
        return raw
    return format_cell(value)


def _shared_strings(zf: zipfile.ZipFile) -> list[str]:
    if "xl/sharedStrings.xml" not in zf.namelist():
        return []
    root = ElementTree.fromstring(zf.read("xl/sharedStrings.xml"))
    strings = []
    for si in root.findall(f"{_XLSX_NS}si"):
        strings.append("".join(t.text or "" for t in si.iter(f"{_XLSX_NS}t")))
    return strings


def _first_sheet_path(zf: zipfile.ZipFile) -> str:
    names = set(zf.namelist())
    if "xl/workbook.xml" not in names:
        raise UnsupportedSheet("workbook.xml missing")
    wb = ElementTree.fromstring(zf.read("xl/workbook.xml"))
    sheets = wb.findall(f"{_XLSX_NS}sheets/{_XLSX_NS}sheet")
    if not sheets:
        raise UnsupportedSheet("workbook declares no sheets")
    rel_id = sheets[0].get(_REL_ATTR)
    if rel_id and "xl/_rels/workbook.xml.rels" in names:
        rels = ElementTree.fromstring(zf.read("xl/_rels/workbook.xml.rels"))
        for rel in rels.findall(f"{_RELS_NS}Relationship"):
            if rel.get("Id") == rel_id:
                target = rel.get("Target", "")
                path = target.lstrip("/")
                if not path.startswith("xl/"):
                    path = "xl/" + path
                if path in names:
                    return path
    if "xl/worksheets/sheet1.xml" in names:
        return "xl/worksheets/sheet1.xml"
    raise UnsupportedSheet("first worksheet not found in archive")


def _cell_value(cell: ElementTree.Element, shared: list[str]) -> str:
    ctype = cell.get("t", "n")
    if ctype == "inlineStr":
        is_el = cell.find(f"{_XLSX_NS}is")
        if is_el is None:
            return ""
        return "".join(t.text or "" for t in is_el.iter(f"{_XLSX_NS}t"))
    v = cell.find(f"{_XLSX_NS}v")
    if v is None or v.text is None:
        return ""  # formula cell without cached value
    if ctype == "s":
        idx = int(v.text)
        return shared[idx] if 0 <= idx < len(shared) else ""
    if ctype == "b":
        return "true" if v.text.strip() in ("1", "true") else "false"
    if ctype in ("str", "e"):
        return v.text
    return _xlsx_number(v.text)


def _parse_xlsx(data: bytes) -> TabularDataset:
    try:
        zf = zipfile.ZipFile(io.BytesIO(data))
    except (zipfile.BadZipFile, ValueError) as exc:
        raise UnsupportedSheet(f"not a readable XLSX container: {exc}") from exc
    with zf:
        shared = _shared_strings(zf)
        sheet_path = _first_sheet_path(zf)
        root = ElementTree.fromstring(zf.read(sheet_path))
        grid: list[list[str]] = []
        for row_el in root.iter(f"{_XLSX_NS}row"):
            row: list[str] = []
            for cell in row_el.findall(f"{_XLSX_NS}c"):
                ref = cell.get("r")
                col = _col_index(ref) if ref else None
                if col is None:
                    col = len(row)
                while len(row) <= col:
                    row.append("")
                row[col] = _cell_value(cell, shared)
            grid.append(row)
    if len(grid) < 2:
        raise EmptyTable("XLSX sheet needs a header row and at least one data row")
    headers = grid[0]
    arity = len(headers)
    rows = []
    for i, row in enumerate(grid[1:], start=2):
        if len(row) > arity:
            raise RaggedRows(f"XLSX row {i} wider than header row")
        rows.append(row + [""] * (arity - len(row)))
    return TabularDataset.from_rows(headers, rows)
