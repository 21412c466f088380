"""Streaming readers for face geometries, address species and establishments.

Readers take a binary stream plus a :class:`ColumnMapping` and return
``(iterator, stats)``. The iterator is lazy; ``stats`` fills in as it is
consumed. Bad rows are counted and sampled in the stats, never raised,
unless the caller asks for ``strict`` behaviour.
"""

from __future__ import annotations

import csv
import io
import operator
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping, Optional, Tuple

import yaml

from . import geometry as geom
from .model import (
    DataError,
    DuplicateFaceCode,
    EstablishmentRecord,
    IngestStats,
    MalformedCep,
    MissingField,
    SectorMapping,
    Species,
    StreetFace,
    municipality_prefix,
    normalize_cep,
    parse_jobs,
    parse_year,
    sector_of,
    validate_face_code,
    validate_municipality,
)

# canonical logical-field order per input kind; partition files use it too
FACE_FIELDS = ("face_code", "municipality", "geometry", "vertices")
SPECIES_FIELDS = ("face_code", "cep", "species", "municipality")
ESTABLISHMENT_FIELDS = ("establishment_id", "municipality", "cep", "activity", "jobs", "year")

KIND_FIELDS = {
    "faces": FACE_FIELDS,
    "species": SPECIES_FIELDS,
    "establishments": ESTABLISHMENT_FIELDS,
}

ENCODINGS = {"utf-8": "utf-8", "utf8": "utf-8", "latin-1": "latin-1", "latin1": "latin-1", "iso-8859-1": "latin-1"}


class MappingError(ValueError):
    """Invalid column-mapping configuration."""


class StrictModeError(RuntimeError):
    def __init__(self, kind: str, line_no: int, reason: str, detail: str = ""):
        super().__init__(f"{kind} line {line_no}: {reason} {detail}".rstrip())
        self.kind = kind
        self.line_no = line_no
        self.reason = reason


@dataclass(frozen=True)
class ColumnMapping:
    """Where each logical field lives in a source file.

    ``fields`` maps a logical name to a 0-based column index or a header
    name (delimited) or to a half-open ``[start, end)`` byte range
    (fixed width). ``constants`` supplies values for fields the file does not
    carry, e.g. the year of a yearly extract.
    """

    kind: str
    fields: Mapping[str, object]
    source_kind: str = "delimited"
    delimiter: str = ","
    encoding: str = "utf-8"
    header: bool = False
    constants: Mapping[str, str] = field(default_factory=dict)
    derive_municipality: bool = False

    def __post_init__(self):
        if self.kind not in KIND_FIELDS:
            raise MappingError(f"unknown input kind {self.kind!r}")
        if self.source_kind not in ("delimited", "fixed_width"):
            raise MappingError(f"source_kind must be 'delimited' or 'fixed_width', not {self.source_kind!r}")
        if self.encoding.lower() not in ENCODINGS:
            raise MappingError(f"encoding must be UTF-8 or Latin-1, not {self.encoding!r}")
        object.__setattr__(self, "encoding", ENCODINGS[self.encoding.lower()])
        if self.source_kind == "delimited" and len(self.delimiter) != 1:
            raise MappingError("delimiter must be a single character")
        known = set(KIND_FIELDS[self.kind])
        for name in list(self.fields) + list(self.constants):
            if name not in known:
                raise MappingError(f"{self.kind}: unknown logical field {name!r}")
        both = set(self.fields) & set(self.constants)
        if both:
            raise MappingError(f"{self.kind}: fields mapped twice (column and constant): {sorted(both)}")
        provided = set(self.fields) | set(self.constants)
        missing = [f for f in self.required_fields() if f not in provided]
        if missing:
            raise MappingError(f"{self.kind}: required fields not mapped: {missing}")
        if self.kind == "faces" and ("geometry" in provided) == ("vertices" in provided):
            raise MappingError("faces: map exactly one of 'geometry' (WKT) or 'vertices'")
        if self.source_kind == "fixed_width":
            self._check_ranges()
        else:
            for name, ref in self.fields.items():
                if isinstance(ref, bool) or not isinstance(ref, (int, str)):
                    raise MappingError(f"{self.kind}.{name}: delimited column must be an index or header name")
                if isinstance(ref, str) and not self.header:
                    raise MappingError(f"{self.kind}.{name}: header names need 'header: true'")
                if isinstance(ref, int) and ref < 0:
                    raise MappingError(f"{self.kind}.{name}: negative column index")

    def required_fields(self) -> Tuple[str, ...]:
        if self.kind == "faces":
            req = ("face_code",) if self.derive_municipality else ("face_code", "municipality")
        elif self.kind == "species":
            req = ("face_code", "cep", "species")
        else:
            req = ESTABLISHMENT_FIELDS
        return req

    def _check_ranges(self) -> None:
        prev_end = 0
        for name, ref in self.fields.items():
            if not (isinstance(ref, (list, tuple)) and len(ref) == 2 and all(isinstance(v, int) for v in ref)):
                raise MappingError(f"{self.kind}.{name}: fixed-width field needs [start, end]")
            start, end = ref
            if not 0 <= start < end:
                raise MappingError(f"{self.kind}.{name}: empty or negative byte range {ref}")
            if start < prev_end:
                raise MappingError(f"{self.kind}.{name}: byte ranges must be ascending and non-overlapping")
            prev_end = end

    @classmethod
    def from_dict(cls, kind: str, data: Mapping) -> "ColumnMapping":
        data = dict(data)
        fields = data.pop("fields", None)
        if not isinstance(fields, Mapping):
            raise MappingError(f"{kind}: 'fields' must be a mapping")
        fields = {k: (tuple(v) if isinstance(v, list) else v) for k, v in fields.items()}
        constants = {k: str(v) for k, v in (data.pop("constants", None) or {}).items()}
        kwargs = {}
        for key in ("source_kind", "delimiter", "encoding", "header", "derive_municipality"):
            if key in data:
                kwargs[key] = data.pop(key)
        if data:
            raise MappingError(f"{kind}: unknown mapping keys {sorted(data)}")
        return cls(kind=kind, fields=fields, constants=constants, **kwargs)


@dataclass(frozen=True)
class MappingSet:
    """The three input mappings plus the activity-to-sector table."""

    faces: ColumnMapping
    species: ColumnMapping
    establishments: ColumnMapping
    sectors: SectorMapping

    def for_kind(self, kind: str) -> ColumnMapping:
        return getattr(self, kind)


def load_mapping_set(paths: Iterable[str]) -> MappingSet:
    """Load one or more YAML mapping files; later files override earlier sections."""
    from .model import DEFAULT_SECTOR_MAPPING

    merged: dict = {}
    for path in paths:
        with open(path, "r", encoding="utf-8") as fh:
            doc = yaml.safe_load(fh) or {}
        if not isinstance(doc, Mapping):
            raise MappingError(f"{path}: top level must be a mapping")
        merged.update(doc)
    unknown = set(merged) - {"faces", "species", "establishments", "sectors"}
    if unknown:
        raise MappingError(f"unknown mapping sections {sorted(unknown)}")
    for kind in ("faces", "species", "establishments"):
        if kind not in merged:
            raise MappingError(f"mapping section {kind!r} missing")
    sectors = SectorMapping.from_dict(merged["sectors"]) if "sectors" in merged else DEFAULT_SECTOR_MAPPING
    return MappingSet(
        faces=ColumnMapping.from_dict("faces", merged["faces"]),
        species=ColumnMapping.from_dict("species", merged["species"]),
        establishments=ColumnMapping.from_dict("establishments", merged["establishments"]),
        sectors=sectors,
    )


def default_mapping_path() -> str:
    from importlib.resources import files

    return str(files("facejobs") / "mappings" / "normalized.yaml")


def _text(stream, encoding: str):
    if isinstance(stream, io.TextIOBase):
        return stream
    return io.TextIOWrapper(stream, encoding=encoding, newline="")


def _assembler(mapping: ColumnMapping, positions: Mapping[str, object]):
    """Build row -> canonical tuple. ``positions`` holds resolved column refs."""
    canon = KIND_FIELDS[mapping.kind]
    mapped = [name for name in canon if name in positions]
    refs = [positions[name] for name in mapped]
    required = set(mapping.required_fields())
    req_slots = [i for i, name in enumerate(mapped) if name in required]

    if mapping.source_kind == "delimited":
        width = max(refs) + 1 if refs else 0
        if len(refs) == 1:
            r0 = refs[0]
            getter = lambda row: (row[r0],)  # noqa: E731
        elif refs:
            getter = operator.itemgetter(*refs)
        else:
            getter = lambda row: ()  # noqa: E731
    else:
        width = max(end for _, end in refs) if refs else 0
        enc = mapping.encoding
        slices = [slice(s, e) for s, e in refs]
        getter = lambda row: tuple(row[s].decode(enc).strip() for s in slices)  # noqa: E731

    layout = []
    for name in canon:
        if name in positions:
            layout.append(("col", mapped.index(name)))
        elif name in mapping.constants:
            layout.append(("const", mapping.constants[name]))
        else:
            layout.append(("none", None))
    direct = all(kind == "col" for kind, _ in layout)

    def assemble(row):
        if len(row) < width:
            return None
        vals = getter(row)
        for i in req_slots:
            if not vals[i]:
                return None
        if direct:
            return vals
        return tuple(vals[v] if k == "col" else v for k, v in layout)

    return assemble


def iter_rows(stream, mapping: ColumnMapping, stats: IngestStats, strict: bool = False) -> Iterator[tuple]:
    """Yield ``(line_no, canonical_values)``; rows with missing fields are rejected.

    Blank lines are skipped without being counted.
    """
    if mapping.source_kind == "delimited":
        reader = csv.reader(_text(stream, mapping.encoding), delimiter=mapping.delimiter)
        positions = dict(mapping.fields)
        if mapping.header:
            header = next(reader, None)
            if header is None:
                return
            names = {h.strip().lstrip("\ufeff"): i for i, h in enumerate(header)}
            for name, ref in positions.items():
                if isinstance(ref, str):
                    if ref not in names:
                        raise MappingError(f"{mapping.kind}: column {ref!r} not in header")
                    positions[name] = names[ref]
        assemble = _assembler(mapping, positions)
        for row in reader:
            if not row:
                continue
            vals = assemble(row)
            if vals is None:
                _reject(stats, reader.line_num, MissingField.reason, "", mapping.kind, strict)
                continue
            yield reader.line_num, vals
    else:
        if isinstance(stream, io.TextIOBase):
            raise MappingError("fixed-width sources must be opened in binary mode")
        assemble = _assembler(mapping, dict(mapping.fields))
        for line_no, raw in enumerate(stream, 1):
            line = raw.rstrip(b"\r\n")
            if not line.strip():
                continue
            try:
                vals = assemble(line)
            except UnicodeDecodeError:
                vals = None
            if vals is None:
                _reject(stats, line_no, MissingField.reason, "", mapping.kind, strict)
                continue
            yield line_no, vals


def _reject(stats: IngestStats, line_no: int, reason: str, detail: str, kind: str, strict: bool) -> None:
    stats.reject(line_no, reason, detail)
    if strict:
        raise StrictModeError(kind, line_no, reason, detail)


# -- per-row validators over canonical tuples ------------------------------


def face_from_values(vals, derive_municipality: bool = False) -> StreetFace:
    code = validate_face_code(vals[0])
    if derive_municipality and not vals[1]:
        muni = validate_municipality(municipality_prefix(code))
    else:
        if not vals[1]:
            raise MissingField("municipality")
        muni = validate_municipality(vals[1])
    if vals[2]:
        g = geom.parse_wkt(vals[2])
    elif vals[3]:
        g = geom.parse_vertex_list(vals[3])
    else:
        raise MissingField("geometry")
    verts = g.vertices
    # a polyline has zero length exactly when all of its vertices coincide
    degenerate = len(verts) > 1 and verts.count(verts[0]) == len(verts)
    return StreetFace(code, muni, g, degenerate)


def species_from_values(vals) -> Tuple[str, str, Species]:
    face = validate_face_code(vals[0])
    try:
        cep = normalize_cep(vals[1])
    except DataError as exc:
        raise MalformedCep(str(exc)) from None
    return face, cep, Species.parse(vals[2])


def establishment_from_values(vals, sectors: SectorMapping) -> EstablishmentRecord:
    est_id, muni, cep, activity, jobs, year = vals[:6]
    try:
        cep = normalize_cep(cep)
    except DataError as exc:
        raise MalformedCep(str(exc)) from None
    return EstablishmentRecord(
        establishment_id=est_id.strip(),
        municipality=validate_municipality(muni),
        cep=cep,
        sector=sector_of(activity, sectors),
        jobs=parse_jobs(jobs),
        year=parse_year(year),
    )


# -- readers --------------------------------------------------------------


def validate_faces(rows, stats: IngestStats, derive_municipality=False, strict=False, seen=None):
    """Validate canonical face rows; the second occurrence of a code is rejected."""
    seen = set() if seen is None else seen
    for line_no, vals in rows:
        try:
            face = face_from_values(vals, derive_municipality)
            if face.face_code in seen:
                raise DuplicateFaceCode(face.face_code)
        except DataError as exc:
            _reject(stats, line_no, exc.reason, str(exc), "faces", strict)
            continue
        seen.add(face.face_code)
        stats.accept()
        yield face


def validate_species(rows, stats: IngestStats, strict=False):
    # face codes and CEPs repeat heavily within a partition; cache the clean forms
    good_faces = set()
    ceps = {}
    for line_no, vals in rows:
        raw_face, raw_cep, raw_species = vals[0], vals[1], vals[2]
        try:
            if raw_face in good_faces:
                face = raw_face
            else:
                face = validate_face_code(raw_face)
                if face == raw_face:
                    good_faces.add(face)
            cep = ceps.get(raw_cep)
            if cep is None:
                try:
                    cep = ceps[raw_cep] = normalize_cep(raw_cep)
                except DataError as exc:
                    raise MalformedCep(str(exc)) from None
            rec = (face, cep, Species.parse(raw_species))
        except DataError as exc:
            _reject(stats, line_no, exc.reason, str(exc), "species", strict)
            continue
        stats.accept()
        yield rec


def validate_establishments(rows, stats: IngestStats, sectors: SectorMapping, strict=False, year=None):
    """Validate establishment rows; valid rows of another year only count as filtered."""
    ceps = {}
    activities = {}
    for line_no, vals in rows:
        try:
            est_id, muni, raw_cep, activity, jobs, raw_year = vals[:6]
            cep = ceps.get(raw_cep)
            if cep is None:
                try:
                    cep = ceps[raw_cep] = normalize_cep(raw_cep)
                except DataError as exc:
                    raise MalformedCep(str(exc)) from None
            sector = activities.get(activity)
            if sector is None:
                sector = activities[activity] = sector_of(activity, sectors)
            rec = EstablishmentRecord(
                establishment_id=est_id.strip(),
                municipality=validate_municipality(muni),
                cep=cep,
                sector=sector,
                jobs=parse_jobs(jobs),
                year=parse_year(raw_year),
            )
        except DataError as exc:
            _reject(stats, line_no, exc.reason, str(exc), "establishments", strict)
            continue
        if year is not None and rec.year != year:
            stats.rows_filtered += 1
            continue
        stats.accept()
        yield rec


def read_faces(geometry_source, mapping: ColumnMapping, strict: bool = False):
    stats = IngestStats()
    rows = iter_rows(geometry_source, mapping, stats, strict)
    return validate_faces(rows, stats, mapping.derive_municipality, strict), stats


def read_address_species(source, mapping: ColumnMapping, strict: bool = False):
    stats = IngestStats()
    rows = iter_rows(source, mapping, stats, strict)
    return validate_species(rows, stats, strict), stats


def read_establishments(source, mapping: ColumnMapping, sector_config: SectorMapping, strict: bool = False):
    stats = IngestStats()
    rows = iter_rows(source, mapping, stats, strict)
    return validate_establishments(rows, stats, sector_config, strict), stats


def build_tallies(address_stream: Iterable[Tuple[str, str, Species]]) -> dict:
    """``face -> Counter((cep, species) -> count)``."""
    flat = Counter(address_stream)
    tallies: dict = {}
    for (face, cep, species), n in flat.items():
        tally = tallies.get(face)
        if tally is None:
            tally = tallies[face] = Counter()
        tally[(cep, species)] = n
    return tallies


def merge_tallies(a: Mapping, b: Mapping) -> dict:
    """Associative merge of two tally mappings (for sharded aggregation)."""
    out = {face: Counter(t) for face, t in a.items()}
    for face, t in b.items():
        out.setdefault(face, Counter()).update(t)
    return out


def open_source(path: str):
    return open(path, "rb")


def inspect_file(path: str, mapping: ColumnMapping, sectors: Optional[SectorMapping] = None) -> IngestStats:
    """Read and validate a whole file, discarding the records."""
    with open_source(path) as fh:
        if mapping.kind == "faces":
            it, stats = read_faces(fh, mapping)
        elif mapping.kind == "species":
            it, stats = read_address_species(fh, mapping)
        else:
            from .model import DEFAULT_SECTOR_MAPPING

            it, stats = read_establishments(fh, mapping, sectors or DEFAULT_SECTOR_MAPPING)
        for _ in it:
            pass
    return stats
