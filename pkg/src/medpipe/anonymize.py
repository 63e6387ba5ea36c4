"""Rule-based PII detection and masking over tabular cells and images.

Every cell is scanned as its string rendering. Overlapping candidate matches
are resolved longest-match-wins; masking replaces each span with the fixed
token "****" so value lengths never leak. Schema (headers, row and column
counts) is preserved.
"""

from __future__ import annotations

import io
import ipaddress
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Protocol

from PIL import Image, ImageDraw

from .ingest import IMAGE_MIMES, FileArtifact
from .tabular import TabularDataset, format_cell

MASK_TOKEN = "****"

DEFAULT_MRN_PATTERN = r"MRN[- ]?\d{6,10}"


class PiiKind(str, Enum):
    PERSON_NAME = "PersonName"
    EMAIL = "Email"
    PHONE = "Phone"
    MEDICAL_RECORD_NUMBER = "MedicalRecordNumber"
    CREDIT_CARD = "CreditCard"
    IP_ADDRESS = "IpAddress"
    DATE_OF_BIRTH = "DateOfBirth"
    NATIONAL_ID = "NationalId"


class Confidence(str, Enum):
    RULE = "Rule"
    CHECKSUM = "Checksum"
    DICTIONARY = "Dictionary"


# Equal-length overlaps resolve toward the more specific detector.
_PRIORITY = [
    PiiKind.EMAIL,
    PiiKind.CREDIT_CARD,
    PiiKind.NATIONAL_ID,
    PiiKind.MEDICAL_RECORD_NUMBER,
    PiiKind.IP_ADDRESS,
    PiiKind.PHONE,
    PiiKind.DATE_OF_BIRTH,
    PiiKind.PERSON_NAME,
]
_PRIORITY_INDEX = {kind: i for i, kind in enumerate(_PRIORITY)}


@dataclass(frozen=True)
class PiiFinding:
    kind: PiiKind
    column: str
    row: int
    span: tuple[int, int]
    confidence: Confidence

    def __post_init__(self) -> None:
        start, end = self.span
        if not 0 <= start < end:
            raise ValueError(f"invalid span {self.span}")

    def to_record(self) -> dict:
        # Export shape deliberately excludes the matched text.
        return {
            "kind": self.kind.value,
            "column": self.column,
            "row": self.row,
            "span": [self.span[0], self.span[1]],
            "confidence": self.confidence.value,
        }


@dataclass(frozen=True)
class MaskPolicy:
    """Which detectors run and with what patterns; built-ins opt out explicitly."""

    enabled: frozenset[PiiKind] = frozenset(PiiKind)
    mrn_pattern: str = DEFAULT_MRN_PATTERN
    extra_patterns: tuple[tuple[PiiKind, str], ...] = ()
    mask_whole_cell: bool = False


def luhn_valid(digits: str) -> bool:
    """Standard Luhn mod-10 check over a decimal string."""
    if not digits.isdigit():
        return False
    total = 0
    for i, ch in enumerate(reversed(digits)):
        d = int(ch)
        if i % 2 == 1:
            d *= 2
            if d > 9:
                d -= 9
        total += d
    return total % 10 == 0


def _context_tokens(context: str) -> set[str]:
    return {t for t in re.split(r"[^a-z0-9]+", context.lower()) if t}


_EMAIL = re.compile(r"[A-Za-z0-9._%+-]+@[A-Za-z0-9-]+(?:\.[A-Za-z0-9-]+)*\.[A-Za-z]{2,}")

_PHONE = re.compile(r"\+?\d[\d ().\-]{5,18}\d")
_PHONE_SEPARATORS = re.compile(r"[ ().\-]")

_DATE_SHAPES = (
    re.compile(r"\d{4}[-/.]\d{1,2}[-/.]\d{1,2}"),
    re.compile(r"\d{1,2}[-/.]\d{1,2}[-/.]\d{4}"),
    re.compile(r"\d{1,2}[-/.]\d{1,2}[-/.]\d{2}"),
)

_CREDIT_CARD = re.compile(r"(?<![\d-])\d(?:[\d -]{11,17})\d(?![\d-])")

_IPV4 = re.compile(r"(?<![\d.])(?:\d{1,3}\.){3}\d{1,3}(?![\d.])")
_IPV6 = re.compile(r"[0-9A-Fa-f:]{3,45}")

_SSN = re.compile(r"(?<![\d-])\d{3}-\d{2}-\d{4}(?![\d-])")

_DOB_CONTEXT = frozenset({"dob", "birth", "birthdate", "date_of_birth"})
_NAME_CONTEXT = frozenset({"name", "patient", "physician"})

_CAPITALIZED_PAIR = re.compile(r"\b[A-Z][a-z]+(?:[ ][A-Z][a-z]+)+\b")
_CAPITALIZED_TOKEN = re.compile(r"\b[A-Z][a-z]+\b")

_GIVEN_NAMES = frozenset(
    name.lower()
    for name in (
        "James Mary John Patricia Robert Jennifer Michael Linda William Elizabeth "
        "David Barbara Richard Susan Joseph Jessica Thomas Sarah Charles Karen "
        "Christopher Nancy Daniel Lisa Matthew Betty Anthony Margaret Mark Sandra "
        "Donald Ashley Steven Kimberly Paul Emily Andrew Donna Joshua Michelle "
        "Kenneth Carol Kevin Amanda Brian Dorothy George Melissa Timothy Deborah "
        "Ronald Stephanie Edward Rebecca Jason Sharon Jeffrey Laura Ryan Cynthia "
        "Jacob Kathleen Gary Amy Nicholas Angela Eric Shirley Jonathan Anna "
        "Stephen Brenda Larry Pamela Justin Emma Scott Nicole Brandon Helen "
        "Benjamin Samantha Samuel Katherine Gregory Christine Alexander Debra "
        "Patrick Rachel Frank Carolyn Raymond Janet Jack Maria Dennis Heather "
        "Jerry Diane Tyler Ruth Aaron Julie Jose Olivia Adam Joyce Nathan Virginia"
    ).split()
)

_Candidate = tuple[int, int, "PiiKind", "Confidence"]


def _find_emails(text: str, context: str) -> list[_Candidate]:
    return [
        (m.start(), m.end(), PiiKind.EMAIL, Confidence.RULE)
        for m in _EMAIL.finditer(text)
    ]


def _looks_like_date(value: str) -> bool:
    return any(p.fullmatch(value) for p in _DATE_SHAPES)


def _find_phones(text: str, context: str) -> list[_Candidate]:
    out = []
    for m in _PHONE.finditer(text):
        value = m.group()
        digits = re.sub(r"\D", "", value)
        if not 7 <= len(digits) <= 15:
            continue
        # Bare digit runs are not phones; require E.164 or visible grouping.
        # A lone dot is a decimal point, not a phone separator.
        separated = (
            value.startswith("+")
            or bool(_PHONE_SEPARATORS.search(value.replace(".", "")))
            or value.count(".") >= 2
        )
        if not separated or _looks_like_date(value):
            continue
        out.append((m.start(), m.end(), PiiKind.PHONE, Confidence.RULE))
    return out


def _find_credit_cards(text: str, context: str) -> list[_Candidate]:
    out = []
    for m in _CREDIT_CARD.finditer(text):
        digits = re.sub(r"[ -]", "", m.group())
        if digits.isdigit() and 13 <= len(digits) <= 19 and luhn_valid(digits):
            out.append((m.start(), m.end(), PiiKind.CREDIT_CARD, Confidence.CHECKSUM))
    return out


def _find_ip_addresses(text: str, context: str) -> list[_Candidate]:
    out = []
    for m in _IPV4.finditer(text):
        if all(int(octet) <= 255 for octet in m.group().split(".")):
            out.append((m.start(), m.end(), PiiKind.IP_ADDRESS, Confidence.RULE))
    for m in _IPV6.finditer(text):
        if m.group().count(":") < 2:
            continue
        try:
            ipaddress.IPv6Address(m.group())
        except ValueError:
            continue
        out.append((m.start(), m.end(), PiiKind.IP_ADDRESS, Confidence.RULE))
    return out


def _plausible_date(value: str) -> bool:
    parts = re.split(r"[-/.]", value)
    if len(parts) != 3:
        return False
    nums = [int(p) for p in parts]
    if len(parts[0]) == 4:  # year first
        _, a, b = nums
        return (1 <= a <= 12 and 1 <= b <= 31) or (1 <= b <= 12 and 1 <= a <= 31)
    a, b, _ = nums
    return (1 <= a <= 12 and 1 <= b <= 31) or (1 <= b <= 12 and 1 <= a <= 31)


def _find_dates_of_birth(text: str, context: str) -> list[_Candidate]:
    if not (_context_tokens(context) & _DOB_CONTEXT):
        return []
    out = []
    for pattern in _DATE_SHAPES:
        for m in pattern.finditer(text):
            if _plausible_date(m.group()):
                out.append((m.start(), m.end(), PiiKind.DATE_OF_BIRTH, Confidence.RULE))
    return out


def _find_ssns(text: str, context: str) -> list[_Candidate]:
    out = []
    for m in _SSN.finditer(text):
        area, group, serial = m.group().split("-")
        if area in ("000", "666") or area >= "900":
            continue
        if group == "00" or serial == "0000":
            continue
        out.append((m.start(), m.end(), PiiKind.NATIONAL_ID, Confidence.RULE))
    return out


def _find_person_names(text: str, context: str) -> list[_Candidate]:
    if not (_context_tokens(context) & _NAME_CONTEXT):
        return []
    out = []
    for m in _CAPITALIZED_PAIR.finditer(text):
        tokens = m.group().split()
        conf = (
            Confidence.DICTIONARY
            if any(t.lower() in _GIVEN_NAMES for t in tokens)
            else Confidence.RULE
        )
        out.append((m.start(), m.end(), PiiKind.PERSON_NAME, conf))
    for m in _CAPITALIZED_TOKEN.finditer(text):
        if m.group().lower() in _GIVEN_NAMES:
            out.append((m.start(), m.end(), PiiKind.PERSON_NAME, Confidence.DICTIONARY))
    return out


_Finder = Callable[[str, str], list[_Candidate]]


def _builtin_finders(policy: MaskPolicy) -> list[_Finder]:
    mrn = re.compile(policy.mrn_pattern)

    def find_mrns(text: str, context: str) -> list[_Candidate]:
        return [
            (m.start(), m.end(), PiiKind.MEDICAL_RECORD_NUMBER, Confidence.RULE)
            for m in mrn.finditer(text)
        ]

    table: dict[PiiKind, _Finder] = {
        PiiKind.EMAIL: _find_emails,
        PiiKind.PHONE: _find_phones,
        PiiKind.CREDIT_CARD: _find_credit_cards,
        PiiKind.IP_ADDRESS: _find_ip_addresses,
        PiiKind.DATE_OF_BIRTH: _find_dates_of_birth,
        PiiKind.MEDICAL_RECORD_NUMBER: find_mrns,
        PiiKind.NATIONAL_ID: _find_ssns,
        PiiKind.PERSON_NAME: _find_person_names,
    }
    finders = [fn for kind, fn in table.items() if kind in policy.enabled]
    for kind, pattern in policy.extra_patterns:
        if kind not in policy.enabled:
            continue
        compiled = re.compile(pattern)

        def find_extra(
            text: str, context: str, _rx=compiled, _kind=kind
        ) -> list[_Candidate]:
            return [(m.start(), m.end(), _kind, Confidence.RULE) for m in _rx.finditer(text)]

        finders.append(find_extra)
    return finders


def _resolve(candidates: list[_Candidate]) -> list[_Candidate]:
    """Longest match wins on overlap; equal lengths resolve by detector priority."""
    ordered = sorted(
        candidates,
        key=lambda c: (-(c[1] - c[0]), _PRIORITY_INDEX[c[2]], c[0]),
    )
    accepted: list[_Candidate] = []
    for cand in ordered:
        if all(cand[1] <= a[0] or cand[0] >= a[1] for a in accepted):
            accepted.append(cand)
    return sorted(accepted, key=lambda c: c[0])


def scan_cell(
    text: str, context: str, policy: MaskPolicy | None = None
) -> list[PiiFinding]:
    """All non-overlapping findings in one cell; context is the column header."""
    policy = policy or MaskPolicy()
    candidates: list[_Candidate] = []
    for finder in _builtin_finders(policy):
        candidates.extend(finder(text, context))
    return [
        PiiFinding(kind=kind, column=context, row=0, span=(start, end), confidence=conf)
        for start, end, kind, conf in _resolve(candidates)
    ]


def scan_table(table: TabularDataset, policy: MaskPolicy | None = None) -> list[PiiFinding]:
    """Findings over every cell's string rendering, ordered column-then-row."""
    policy = policy or MaskPolicy()
    findings: list[PiiFinding] = []
    for header in table.headers:
        for row_idx, cell in enumerate(table.columns[header]):
            if cell is None:
                continue
            for f in scan_cell(format_cell(cell), header, policy):
                findings.append(replace(f, row=row_idx))
    return findings


def apply_findings(
    table: TabularDataset, findings: list[PiiFinding], policy: MaskPolicy | None = None
) -> TabularDataset:
    """Replace each finding's span with the fixed mask token; schema unchanged."""
    policy = policy or MaskPolicy()
    masked = table.copy()
    by_cell: dict[tuple[str, int], list[PiiFinding]] = {}
    for f in findings:
        by_cell.setdefault((f.column, f.row), []).append(f)
    for (column, row), cell_findings in by_cell.items():
        original = masked.columns[column][row]
        if original is None:
            continue
        text = format_cell(original)
        if policy.mask_whole_cell:
            masked.columns[column][row] = MASK_TOKEN
            continue
        for f in sorted(cell_findings, key=lambda f: f.span[0], reverse=True):
            start, end = f.span
            text = text[:start] + MASK_TOKEN + text[end:]
        masked.columns[column][row] = text
    return masked


def mask_table(table: TabularDataset, policy: MaskPolicy | None = None) -> TabularDataset:
    return apply_findings(table, scan_table(table, policy), policy)


# --- Image redaction -----------------------------------------------------------

Box = tuple[int, int, int, int]  # x_min, y_min, x_max, y_max; max edges exclusive


class VisualRedactionClient(Protocol):
    def detect_regions(self, artifact: FileArtifact) -> list[Box]:
        """May raise ClientUnavailable; never returns partial silence."""
        ...


@dataclass
class StaticRedactionClient:
    """Test double returning the same boxes for every image."""

    boxes: list[Box] = field(default_factory=list)

    def detect_regions(self, artifact: FileArtifact) -> list[Box]:
        return list(self.boxes)


def _black_fill(image: Image.Image):
    bands = len(image.getbands())
    if bands == 1:
        return 0
    if image.mode == "RGBA":
        return (0, 0, 0, 255)
    return tuple(0 for _ in range(bands))


def redact_image(artifact: FileArtifact, client: VisualRedactionClient) -> FileArtifact:
    """Fill client-reported regions with solid black; dimensions unchanged."""
    if artifact.mime not in IMAGE_MIMES:
        raise ValueError(f"redact_image needs PNG/JPEG, got {artifact.mime!r}")
    boxes = client.detect_regions(artifact)
    if not boxes:
        return artifact
    with Image.open(io.BytesIO(artifact.data)) as img:
        img.load()
        draw = ImageDraw.Draw(img)
        fill = _black_fill(img)
        for x_min, y_min, x_max, y_max in boxes:
            if not (0 <= x_min < x_max <= img.width and 0 <= y_min < y_max <= img.height):
                raise ValueError(f"box out of bounds: {(x_min, y_min, x_max, y_max)}")
            draw.rectangle((x_min, y_min, x_max - 1, y_max - 1), fill=fill)
        out = io.BytesIO()
        img.save(out, format="PNG" if artifact.mime == "image/png" else "JPEG")
    return FileArtifact(
        name=artifact.name, data=out.getvalue(), mime=artifact.mime, depth=artifact.depth
    )
