"""Listing CSV parsing, validation and per-city vocabularies."""

from __future__ import annotations

import csv
import datetime
import io
import logging
import math
from collections import Counter
from dataclasses import dataclass, field, fields
from typing import IO, Iterable, Sequence, Union

import numpy as np

logger = logging.getLogger(__name__)

COLUMNS = (
    "city", "district", "residence", "year", "building_type", "price", "area",
    "bedroom", "livingroom", "kitchen", "bathroom", "floor", "structure",
    "decoration", "direction",
)

BUILDING_TYPES = (
    "Bungalow", "High-rise", "High-level", "Multi-storey", "Entire Block",
    "Semi-detached House", "Detached House", "Siheyuan",
)
DECORATIONS = ("None", "Partial", "Simple", "Mid-range", "Deluxe", "Luxury")
DIRECTIONS = (
    "North", "South", "East", "West", "NorthEast", "NorthWest", "SouthEast",
    "SouthWest", "NorthSouth", "EastWest",
)

MIN_YEAR = 1900
# Latest completion year in the reference data; newer years are kept but counted.
WARN_YEAR = 2019

# Inclusive bounds for the integer-valued fields.
INT_BOUNDS = {
    "bedroom": (0, 9),
    "livingroom": (0, 7),
    "kitchen": (0, 5),
    "bathroom": (0, 9),
    "floor": (-10, 63),
}
AREA_BOUNDS = (10.0, 2900.0)

# Drop causes reported by clean().
MISSING_FIELD = "MissingField"
UNPARSEABLE = "Unparseable"
OUT_OF_RANGE = "OutOfRange"
UNKNOWN_LABEL = "UnknownLabel"


class IngestError(Exception):
    """Fatal problem with an input file."""


class MissingColumn(IngestError):
    pass


class NonUtf8(IngestError):
    pass


class EmptyInput(ValueError):
    pass


class MixedCities(ValueError):
    pass


@dataclass(frozen=True)
class ParseError:
    row: int
    cause: str


@dataclass(frozen=True)
class RawRecord:
    """One data row as text, keyed by column name. Empty cells are None."""

    city: str | None
    district: str | None
    residence: str | None
    year: str | None
    building_type: str | None
    price: str | None
    area: str | None
    bedroom: str | None
    livingroom: str | None
    kitchen: str | None
    bathroom: str | None
    floor: str | None
    structure: str | None
    decoration: str | None
    direction: str | None
    row: int = -1


@dataclass(frozen=True)
class PropertyRecord:
    city: str
    district: str
    residence: str
    year: int
    building_type: str
    price: float
    area: float
    bedroom: int
    livingroom: int
    kitchen: int
    bathroom: int
    floor: int
    structure: str
    decoration: str
    direction: str

    def as_raw(self, row: int = -1) -> RawRecord:
        values = {name: _format(getattr(self, name)) for name in COLUMNS}
        return RawRecord(row=row, **values)

    def as_row(self) -> list[str]:
        return [_format(getattr(self, name)) for name in COLUMNS]


def _format(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class CleanReport:
    kept: int = 0
    dropped: Counter = field(default_factory=Counter)
    # (row, cause, column) for every dropped record
    details: list[tuple[int, str, str]] = field(default_factory=list)
    # records kept although year > WARN_YEAR
    late_year_warnings: int = 0

    @property
    def n_dropped(self) -> int:
        return sum(self.dropped.values())


@dataclass(frozen=True)
class CityVocabulary:
    city: str
    districts: tuple[str, ...]
    residences: tuple[str, ...]
    structures: tuple[str, ...]

    def to_dict(self) -> dict:
        return {
            "city": self.city,
            "districts": list(self.districts),
            "residences": list(self.residences),
            "structures": list(self.structures),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CityVocabulary":
        return cls(
            city=str(d["city"]),
            districts=tuple(d["districts"]),
            residences=tuple(d["residences"]),
            structures=tuple(d["structures"]),
        )


def parse_records(
    source: Union[str, bytes, IO[str], IO[bytes]],
) -> tuple[list[RawRecord], list[ParseError]]:
    """Parse listing CSV text into raw records.

    ``source`` may be text, UTF-8 bytes, or an open text/binary stream. Columns
    are matched by header name, in any order. Rows with the wrong number of
    cells become ``ParseError`` entries; a bad header raises ``MissingColumn``.
    """
    text = _read_text(source)
    reader = csv.reader(io.StringIO(text, newline=""))
    try:
        header = next(reader)
    except StopIteration:
        raise MissingColumn("empty input: no header row") from None

    header = [h.strip() for h in header]
    missing = [c for c in COLUMNS if c not in header]
    if missing:
        raise MissingColumn(f"missing column(s): {', '.join(missing)}")
    extra = [h for h in header if h not in COLUMNS]
    if extra or len(header) != len(COLUMNS):
        raise MissingColumn(f"unexpected header columns: {header}")
    index = {name: header.index(name) for name in COLUMNS}

    records: list[RawRecord] = []
    errors: list[ParseError] = []
    for row_no, cells in enumerate(reader):
        if not cells:
            # csv yields [] for blank lines; they are not data rows
            continue
        if len(cells) != len(COLUMNS):
            errors.append(ParseError(row_no, f"BadArity: expected {len(COLUMNS)} fields, got {len(cells)}"))
            continue
        values = {}
        for name in COLUMNS:
            cell = cells[index[name]].strip()
            values[name] = cell if cell else None
        records.append(RawRecord(row=row_no, **values))
    return records, errors


def _read_text(source) -> str:
    if isinstance(source, str):
        return source
    if isinstance(source, (bytes, bytearray)):
        data = bytes(source)
    else:
        data = source.read()
        if isinstance(data, str):
            return data
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise NonUtf8(f"input is not valid UTF-8: {exc}") from None
    return text.removeprefix("﻿")


def _parse_int(text: str) -> int:
    try:
        return int(text)
    except ValueError:
        value = float(text)
        if not value.is_integer():
            raise ValueError(f"not an integer: {text!r}") from None
        return int(value)


def _parse_float(text: str) -> float:
    value = float(text)
    if not math.isfinite(value):
        raise ValueError(f"non-finite value: {text!r}")
    return value


class _Drop(Exception):
    def __init__(self, cause: str, column: str):
        self.cause = cause
        self.column = column


def _validate(raw: RawRecord, max_year: int) -> PropertyRecord:
    for name in COLUMNS:
        if getattr(raw, name) is None:
            raise _Drop(MISSING_FIELD, name)

    values: dict = {}
    for name in ("city", "district", "residence", "structure"):
        values[name] = getattr(raw, name)

    for name, labels in (
        ("building_type", BUILDING_TYPES),
        ("decoration", DECORATIONS),
        ("direction", DIRECTIONS),
    ):
        label = getattr(raw, name)
        if label not in labels:
            raise _Drop(UNKNOWN_LABEL, name)
        values[name] = label

    for name in ("year", *INT_BOUNDS):
        try:
            values[name] = _parse_int(getattr(raw, name))
        except ValueError:
            raise _Drop(UNPARSEABLE, name) from None
    for name in ("price", "area"):
        try:
            values[name] = _parse_float(getattr(raw, name))
        except ValueError:
            raise _Drop(UNPARSEABLE, name) from None

    if not MIN_YEAR <= values["year"] <= max_year:
        raise _Drop(OUT_OF_RANGE, "year")
    if values["price"] <= 0:
        raise _Drop(OUT_OF_RANGE, "price")
    if not AREA_BOUNDS[0] <= values["area"] <= AREA_BOUNDS[1]:
        raise _Drop(OUT_OF_RANGE, "area")
    for name, (lo, hi) in INT_BOUNDS.items():
        if not lo <= values[name] <= hi:
            raise _Drop(OUT_OF_RANGE, name)

    return PropertyRecord(**values)


def clean(
    raws: Iterable[RawRecord], max_year: int | None = None
) -> tuple[list[PropertyRecord], CleanReport]:
    """Validate raw records, dropping any with a missing, unparseable,
    out-of-range or unknown value. Input order is preserved."""
    if max_year is None:
        max_year = datetime.date.today().year + 1
    report = CleanReport()
    out: list[PropertyRecord] = []
    for raw in raws:
        try:
            rec = _validate(raw, max_year)
        except _Drop as drop:
            report.dropped[drop.cause] += 1
            report.details.append((raw.row, drop.cause, drop.column))
            continue
        if rec.year > WARN_YEAR:
            report.late_year_warnings += 1
        out.append(rec)
    report.kept = len(out)
    return out, report


def residence_districts(
    records: Iterable[PropertyRecord],
) -> tuple[dict[str, str], list[tuple[str, str, str]]]:
    """Map each residence to its district (first seen wins).

    Also returns ``(residence, kept_district, conflicting_district)`` for each
    record that disagrees with the first-seen assignment.
    """
    mapping: dict[str, str] = {}
    conflicts = []
    for rec in records:
        first = mapping.setdefault(rec.residence, rec.district)
        if first != rec.district:
            conflicts.append((rec.residence, first, rec.district))
    return mapping, conflicts


def build_vocabulary(records: Sequence[PropertyRecord]) -> CityVocabulary:
    if not records:
        raise EmptyInput("cannot build a vocabulary from zero records")
    cities = {r.city for r in records}
    if len(cities) > 1:
        raise MixedCities(f"records span several cities: {sorted(cities)}")
    _, conflicts = residence_districts(records)
    if conflicts:
        logger.warning(
            "%d record(s) place a residence in more than one district; "
            "first-seen district kept (e.g. %s)", len(conflicts), conflicts[0],
        )
    return CityVocabulary(
        city=records[0].city,
        districts=tuple(sorted({r.district for r in records})),
        residences=tuple(sorted({r.residence for r in records})),
        structures=tuple(sorted({r.structure for r in records})),
    )


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_train_test(
    records: Sequence, test_fraction: float, seed: int
) -> tuple[list, list]:
    """Random train/test partition with ``round(test_fraction * N)`` test rows.

    Both parts keep the input's relative order.
    """
    if not 0.0 <= test_fraction < 1.0:
        raise ValueError(f"test_fraction must lie in [0, 1), got {test_fraction}")
    n = len(records)
    n_test = _round_half_up(test_fraction * n)
    perm = np.random.default_rng(seed).permutation(n)
    test_idx = set(perm[:n_test].tolist())
    train = [r for i, r in enumerate(records) if i not in test_idx]
    test = [r for i, r in enumerate(records) if i in test_idx]
    return train, test


def load_csv(path) -> tuple[list[PropertyRecord], list[ParseError], CleanReport]:
    """Read, parse and clean one listing CSV file."""
    with open(path, "rb") as fh:
        raws, errors = parse_records(fh)
    records, report = clean(raws)
    return records, errors, report


def write_csv(records: Iterable[PropertyRecord], stream: IO[str]) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(COLUMNS)
    for rec in records:
        writer.writerow(rec.as_row())


def records_to_csv(records: Iterable[PropertyRecord]) -> str:
    buf = io.StringIO()
    write_csv(records, buf)
    return buf.getvalue()


# guard against the dataclass drifting from the column list
assert tuple(f.name for f in fields(PropertyRecord)) == COLUMNS
