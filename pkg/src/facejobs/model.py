"""Domain vocabulary shared by every stage of the pipeline.

All record types are frozen dataclasses so they can be handed to worker
processes freely. Job quantities are exact rationals (``int`` when the
division is exact, ``fractions.Fraction`` otherwise); conversion to decimal
happens only at export.
"""

from __future__ import annotations

import enum
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping, Optional, Union

Rational = Union[int, Fraction]

MIN_YEAR = 2014
FACE_CODE_MIN_DIGITS = 15
FACE_CODE_MAX_DIGITS = 25


class DataError(ValueError):
    """A malformed source value. ``reason`` is the stable rejection tag."""

    reason = "DataError"

    def __init__(self, message: str = ""):
        super().__init__(message or self.reason)


class NonNumeric(DataError):
    reason = "NonNumeric"


class TooLong(DataError):
    reason = "TooLong"


class MalformedCep(DataError):
    reason = "MalformedCep"


class UnknownSpecies(DataError):
    reason = "UnknownSpecies"


class MalformedFaceCode(DataError):
    reason = "MalformedFaceCode"


class MalformedMunicipality(DataError):
    reason = "MalformedMunicipality"


class NegativeJobs(DataError):
    reason = "NegativeJobs"


class BadYear(DataError):
    reason = "BadYear"


class MissingField(DataError):
    reason = "MissingField"


class MalformedGeometry(DataError):
    reason = "MalformedGeometry"


class DuplicateFaceCode(DataError):
    reason = "DuplicateFaceCode"


def _is_ascii_digits(s: str) -> bool:
    return s.isascii() and s.isdigit()


def normalize_cep(raw: str) -> str:
    """Return the 8-digit, left-zero-padded form of a postal code.

    Accepts surrounding whitespace and one optional hyphen (``77001-422``).
    Raises :class:`NonNumeric` or :class:`TooLong`.
    """
    if len(raw) == 8 and _is_ascii_digits(raw):
        return raw
    s = raw.strip()
    if s.count("-") == 1:
        s = s.replace("-", "")
    if not s or not _is_ascii_digits(s):
        raise NonNumeric(f"CEP {raw!r} is not numeric")
    if len(s) > 8:
        raise TooLong(f"CEP {raw!r} has more than 8 digits")
    return s.rjust(8, "0")


class Species(enum.IntEnum):
    """CNEFE address species."""

    PRIVATE_HOUSEHOLD = 1
    COLLECTIVE_HOUSEHOLD = 2
    AGRICULTURAL = 3
    EDUCATIONAL = 4
    HEALTH = 5
    OTHER_PURPOSE = 6
    UNDER_CONSTRUCTION = 7

    @classmethod
    def parse(cls, raw) -> "Species":
        hit = _SPECIES_BY_TEXT.get(raw)
        if hit is not None:
            return hit
        try:
            code = int(str(raw).strip())
        except ValueError:
            raise UnknownSpecies(f"species {raw!r} is not an integer") from None
        if not 1 <= code <= 7:
            raise UnknownSpecies(f"species code {code} outside 1..7")
        return cls(code)


_SPECIES_BY_TEXT = {str(int(s)): s for s in Species}

#: Species counted in the "non residencial" output column.
NON_RESIDENTIAL_SPECIES = frozenset(
    {Species.AGRICULTURAL, Species.EDUCATIONAL, Species.HEALTH, Species.OTHER_PURPOSE}
)


class Sector(str, enum.Enum):
    EDUCATION = "Education"
    HEALTH = "Health"
    AGRICULTURE = "Agriculture"
    OTHER = "Other"

    @classmethod
    def parse(cls, raw: str) -> "Sector":
        for member in cls:
            if raw.strip().lower() == member.value.lower():
                return member
        raise ValueError(f"unknown sector {raw!r}")


class Rule(str, enum.Enum):
    WEIGHTED = "WeightedBySpecies"
    UNIFORM = "UniformOverCepFaces"
    MUNICIPALITY_WIDE = "MunicipalityWide"
    UNALLOCATED = "Unallocated"


def validate_face_code(raw: str) -> str:
    code = raw.strip()
    if not _is_ascii_digits(code):
        raise MalformedFaceCode(f"face code {raw!r} is not all digits")
    if not FACE_CODE_MIN_DIGITS <= len(code) <= FACE_CODE_MAX_DIGITS:
        raise MalformedFaceCode(f"face code {raw!r} must have 15-25 digits")
    return code


def face_sort_key(code: str) -> tuple:
    """Ascending numeric order; the string breaks ties between '01' and '1'."""
    return (int(code), code)


def municipality_prefix(code: str) -> str:
    return code[:7]


def validate_municipality(raw: str) -> str:
    g = raw.strip()
    if len(g) != 7 or not _is_ascii_digits(g):
        raise MalformedMunicipality(f"municipality geocode {raw!r} must be 7 digits")
    return g


def parse_jobs(raw: str) -> int:
    try:
        jobs = int(raw.strip())
    except ValueError:
        raise NonNumeric(f"job count {raw!r} is not an integer") from None
    if jobs < 0:
        raise NegativeJobs(f"job count {jobs} is negative")
    return jobs


def parse_year(raw: str) -> int:
    s = raw.strip()
    if len(s) != 4 or not _is_ascii_digits(s):
        raise BadYear(f"year {raw!r} is not a 4-digit integer")
    year = int(s)
    if year < MIN_YEAR:
        raise BadYear(f"year {year} predates {MIN_YEAR}, the first year with establishment CEPs")
    return year


@dataclass(frozen=True)
class SectorMapping:
    """Longest-prefix table from activity codes to sectors."""

    prefixes: Mapping[str, Sector]
    default: Sector = Sector.OTHER

    def __post_init__(self):
        for prefix in self.prefixes:
            if not prefix or not _is_ascii_digits(prefix):
                raise ValueError(f"activity prefix {prefix!r} must be digits")
        lengths = sorted({len(p) for p in self.prefixes}, reverse=True)
        object.__setattr__(self, "_lengths", tuple(lengths))

    @classmethod
    def from_dict(cls, data: Mapping) -> "SectorMapping":
        prefixes = {str(k): Sector.parse(str(v)) for k, v in (data.get("prefixes") or {}).items()}
        default = Sector.parse(data.get("default", "Other"))
        return cls(prefixes=prefixes, default=default)

    def to_dict(self) -> dict:
        return {
            "default": self.default.value,
            "prefixes": {k: v.value for k, v in sorted(self.prefixes.items())},
        }


DEFAULT_SECTOR_MAPPING = SectorMapping(
    prefixes={
        "01": Sector.AGRICULTURE,
        "02": Sector.AGRICULTURE,
        "03": Sector.AGRICULTURE,
        "85": Sector.EDUCATION,
        "86": Sector.HEALTH,
    }
)

_ACTIVITY_PUNCT = str.maketrans("", "", ".-/ ")


def sector_of(raw_activity_code: str, mapping: SectorMapping) -> Sector:
    """Sector of the longest configured prefix of the activity code."""
    code = raw_activity_code.translate(_ACTIVITY_PUNCT)
    prefixes = mapping.prefixes
    for n in mapping._lengths:
        if len(code) >= n:
            hit = prefixes.get(code[:n])
            if hit is not None:
                return hit
    return mapping.default


@dataclass(frozen=True)
class Geometry:
    """A WGS84 polyline, or a single point when ``len(vertices) == 1``."""

    vertices: tuple

    @property
    def is_point(self) -> bool:
        return len(self.vertices) == 1


@dataclass(frozen=True)
class StreetFace:
    face_code: str
    municipality: str
    geometry: Geometry
    degenerate: bool = False


@dataclass(frozen=True)
class EstablishmentRecord:
    establishment_id: str
    municipality: str
    cep: str
    sector: Sector
    jobs: int
    year: int

    def __post_init__(self):
        if self.jobs < 0:
            raise NegativeJobs(f"job count {self.jobs} is negative")
        if self.year < MIN_YEAR:
            raise BadYear(f"year {self.year} predates {MIN_YEAR}")


@dataclass(frozen=True)
class Allocation:
    """Jobs of one establishment filed under one face.

    ``cep`` is the establishment's CEP, the key the amount is aggregated
    under; ``face_code`` is ``None`` only for :attr:`Rule.UNALLOCATED`.
    """

    establishment_id: str
    face_code: Optional[str]
    cep: str
    amount: Rational
    rule: Rule


@dataclass(frozen=True)
class JobPoint:
    face_code: str
    cep: str
    non_residential: int
    jobs: Rational
    lon: float
    lat: float

    def sort_key(self):
        return (face_sort_key(self.face_code), self.cep)


@dataclass(frozen=True)
class UnallocatedEntry:
    establishment_id: str
    municipality: str
    cep: str
    jobs: int
    reason: str


@dataclass
class IngestStats:
    rows_read: int = 0
    rows_accepted: int = 0
    rows_rejected: int = 0
    rows_filtered: int = 0
    rejection_samples: list = field(default_factory=list)
    rejection_reasons: Counter = field(default_factory=Counter)
    max_samples: int = 20

    def accept(self) -> None:
        self.rows_read += 1
        self.rows_accepted += 1

    def reject(self, line_no: int, reason: str, detail: str = "") -> None:
        self.rows_read += 1
        self.rows_rejected += 1
        self.rejection_reasons[reason] += 1
        if len(self.rejection_samples) < self.max_samples:
            self.rejection_samples.append((line_no, reason, detail))

    def merge(self, other: "IngestStats") -> None:
        self.rows_read += other.rows_read
        self.rows_accepted += other.rows_accepted
        self.rows_rejected += other.rows_rejected
        self.rows_filtered += other.rows_filtered
        self.rejection_reasons.update(other.rejection_reasons)
        merged = sorted(self.rejection_samples + other.rejection_samples)
        self.rejection_samples = merged[: self.max_samples]

    def to_dict(self) -> dict:
        return {
            "rows_read": self.rows_read,
            "rows_accepted": self.rows_accepted,
            "rows_rejected": self.rows_rejected,
            "rows_filtered": self.rows_filtered,
            "rejection_reasons": dict(sorted(self.rejection_reasons.items())),
            "rejection_samples": [
                {"line": ln, "reason": r, "detail": d} for ln, r, d in self.rejection_samples
            ],
        }


@dataclass
class RunReport:
    """Conservation totals and diagnostics for one run or one municipality."""

    input_jobs_total: int = 0
    allocated_jobs_total: Rational = 0
    unallocated: list = field(default_factory=list)
    rule_histogram: Counter = field(default_factory=Counter)
    per_municipality_totals: dict = field(default_factory=dict)
    ingest: dict = field(default_factory=dict)
    degenerate_faces: list = field(default_factory=list)
    coordinate_warnings: list = field(default_factory=list)
    orphan_species_faces: int = 0
    orphan_species_rows: int = 0
    failed_municipalities: list = field(default_factory=list)
    filtered_establishments: int = 0
    rounding: str = "fractional"

    @property
    def unallocated_jobs_total(self) -> int:
        return sum(u.jobs for u in self.unallocated)

    @property
    def conserved(self) -> bool:
        return self.input_jobs_total == self.allocated_jobs_total + self.unallocated_jobs_total

    def merge(self, other: "RunReport") -> None:
        self.input_jobs_total += other.input_jobs_total
        self.allocated_jobs_total += other.allocated_jobs_total
        self.unallocated.extend(other.unallocated)
        self.rule_histogram.update(other.rule_histogram)
        self.per_municipality_totals.update(other.per_municipality_totals)
        for name, stats in other.ingest.items():
            self.ingest.setdefault(name, IngestStats()).merge(stats)
        self.degenerate_faces.extend(other.degenerate_faces)
        self.coordinate_warnings.extend(other.coordinate_warnings)
        self.orphan_species_faces += other.orphan_species_faces
        self.orphan_species_rows += other.orphan_species_rows
        self.failed_municipalities.extend(other.failed_municipalities)
        self.filtered_establishments += other.filtered_establishments
