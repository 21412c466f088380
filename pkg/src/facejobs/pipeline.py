"""End-to-end runs: partition, allocate per municipality, export, report.

Inputs are first split on disk into hash buckets of municipalities, sized
so that one bucket holds a bounded amount of text. Each bucket is then
processed independently (optionally in worker processes), one municipality
at a time. Peak memory therefore depends on the bucket size and the largest
municipality, not on the total input size. Outputs are keyed by
municipality and written in a fixed order, so results do not depend on the
degree of parallelism.
"""

from __future__ import annotations

import csv
import ctypes
import ctypes.util
import heapq
import logging
import math
import os
import shutil
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Tuple

import yaml

from . import export
from .allocator import FRACTIONAL, ROUNDING_MODES, CompatibilityMatrix, allocate_partition, build_index
from .geometry import Verdict, representative_point, validate_coords
from .ingest import (
    MappingError,
    MappingSet,
    StrictModeError,
    build_tallies,
    default_mapping_path,
    iter_rows,
    load_mapping_set,
    validate_establishments,
    validate_faces,
    validate_species,
)
from .model import (
    IngestStats,
    JobPoint,
    MalformedMunicipality,
    RunReport,
    SectorMapping,
    face_sort_key,
    municipality_prefix,
)

log = logging.getLogger(__name__)

DEFAULT_BUCKET_BYTES = 2_000_000
MERGE_FAN_IN = 256
KINDS = ("faces", "species", "establishments")


class ConfigError(ValueError):
    pass


class InputError(IOError):
    pass


@dataclass
class RunConfig:
    faces: str
    species: str
    establishments: str
    out: str
    mappings: Tuple[str, ...] = ()
    year: Optional[int] = None
    municipalities: Optional[Tuple[str, ...]] = None
    rounding: str = FRACTIONAL
    compatibility: Mapping = field(default_factory=dict)
    strict: bool = False
    jobs: int = 1
    combined: bool = False
    bboxes: Mapping = field(default_factory=dict)
    bucket_bytes: int = DEFAULT_BUCKET_BYTES

    FILE_KEYS = (
        "faces", "species", "establishments", "out", "mappings", "year", "municipalities",
        "rounding", "compatibility", "strict", "jobs", "combined", "bboxes", "bucket_bytes",
    )

    @classmethod
    def from_file(cls, path: str, **overrides) -> "RunConfig":
        """Load a YAML run config; non-``None`` keyword overrides win."""
        try:
            with open(path, "r", encoding="utf-8") as fh:
                data = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        unknown = set(data) - set(cls.FILE_KEYS)
        if unknown:
            raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
        base = os.path.dirname(os.path.abspath(path))
        for key in ("faces", "species", "establishments", "out"):
            if key in data and not os.path.isabs(str(data[key])):
                data[key] = os.path.join(base, str(data[key]))
        if "mappings" in data:
            maps = data["mappings"]
            maps = [maps] if isinstance(maps, str) else list(maps)
            data["mappings"] = tuple(m if os.path.isabs(m) else os.path.join(base, m) for m in maps)
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(data)

    @classmethod
    def from_dict(cls, data: Mapping) -> "RunConfig":
        data = dict(data)
        missing = [k for k in ("faces", "species", "establishments", "out") if not data.get(k)]
        if missing:
            raise ConfigError(f"missing required settings: {missing}")
        if data.get("municipalities") is not None:
            data["municipalities"] = tuple(str(g) for g in data["municipalities"])
        if data.get("mappings") is not None:
            maps = data["mappings"]
            data["mappings"] = (maps,) if isinstance(maps, str) else tuple(maps)
        try:
            return cls(**{k: v for k, v in data.items() if k in cls.FILE_KEYS})
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def validate(self) -> None:
        for key in ("faces", "species", "establishments"):
            path = getattr(self, key)
            if not os.path.isfile(path) or not os.access(path, os.R_OK):
                raise InputError(f"{key} input {path!r} is not a readable file")
        for path in self.mappings:
            if not os.path.isfile(path):
                raise ConfigError(f"mapping file {path!r} not found")
        if self.rounding not in ROUNDING_MODES:
            raise ConfigError(f"rounding must be one of {ROUNDING_MODES}")
        if not isinstance(self.jobs, int) or self.jobs < 1:
            raise ConfigError("parallelism (jobs) must be an integer >= 1")
        if self.year is not None and (not isinstance(self.year, int) or self.year < 2014):
            raise ConfigError("year filter must be an integer >= 2014")
        if self.municipalities is not None:
            for g in self.municipalities:
                if len(g) != 7 or not g.isdigit():
                    raise ConfigError(f"municipality filter entry {g!r} is not a 7-digit geocode")
        if self.bucket_bytes < 1:
            raise ConfigError("bucket_bytes must be positive")
        try:
            CompatibilityMatrix.from_dict(self.compatibility)
        except ValueError as exc:
            raise ConfigError(f"compatibility overrides: {exc}") from exc
        for g, box in (self.bboxes or {}).items():
            if not (isinstance(box, (list, tuple)) and len(box) == 4):
                raise ConfigError(f"bbox for {g} needs [min_lon, min_lat, max_lon, max_lat]")

    def mapping_set(self) -> MappingSet:
        paths = self.mappings or (default_mapping_path(),)
        try:
            return load_mapping_set(paths)
        except (MappingError, ValueError, yaml.YAMLError) as exc:
            raise ConfigError(f"mapping config: {exc}") from exc


@dataclass(frozen=True)
class WorkerSettings:
    derive_face_municipality: bool
    sectors: SectorMapping
    matrix: CompatibilityMatrix
    rounding: str
    year: Optional[int]
    strict: bool
    out: str
    combined: bool
    work: str
    bboxes: Mapping


# -- partitioning ---------------------------------------------------------


def bucket_of(geocode: str, n_buckets: int) -> int:
    return zlib.crc32(geocode.encode("ascii", "replace")) % n_buckets


class _BucketWriter:
    def __init__(self, work: str, kind: str, n_buckets: int):
        self.work, self.kind, self.n = work, kind, n_buckets
        self.handles: Dict[int, tuple] = {}

    def writer_for(self, geocode: str):
        """csv writer of the bucket holding ``geocode``; rows are ``(geocode, line, *values)``."""
        b = bucket_of(geocode, self.n)
        entry = self.handles.get(b)
        if entry is None:
            fh = open(bucket_path(self.work, self.kind, b), "w", encoding="utf-8", newline="")
            entry = self.handles[b] = (fh, csv.writer(fh, lineterminator="\n"))
        return entry[1]

    def close(self) -> List[int]:
        for fh, _ in self.handles.values():
            fh.close()
        return sorted(self.handles)


_UNSEEN = object()
_INVALID = object()


def bucket_path(work: str, kind: str, bucket: int) -> str:
    return os.path.join(work, f"{kind}.{bucket:05d}.csv")


def _valid_geocode(g) -> bool:
    return bool(g) and len(g) == 7 and g.isascii() and g.isdigit()


def partition_inputs(config: RunConfig, mappings: MappingSet, work: str, n_buckets: int):
    """Split the three inputs into municipality hash buckets.

    Returns ``(buckets, stats)`` where ``stats`` holds the rows rejected
    while routing (missing fields, unusable municipality).
    """
    selected = set(config.municipalities) if config.municipalities is not None else None
    stats = {kind: IngestStats() for kind in KINDS}
    buckets: set = set()

    sp_map = mappings.species
    need_face_map = not sp_map.derive_municipality and "municipality" not in sp_map.fields and (
        "municipality" not in sp_map.constants
    )
    face_muni: Optional[dict] = {} if need_face_map else None

    def route(kind: str, path: str, geocode_of):
        mapping = mappings.for_kind(kind)
        writer = _BucketWriter(work, kind, n_buckets)
        st = stats[kind]
        try:
            with open(path, "rb") as fh:
                # geocode -> csv writer, or None when the geocode is skipped
                routes: Dict[str, object] = {}
                for line_no, vals in iter_rows(fh, mapping, st, config.strict):
                    g = geocode_of(vals)
                    if g is None:
                        continue
                    w = routes.get(g, _UNSEEN)
                    if w is _UNSEEN:
                        if not _valid_geocode(g):
                            w = _INVALID
                        elif selected is not None and g not in selected:
                            w = None
                        else:
                            w = writer.writer_for(g)
                        routes[g] = w
                    if w is None:
                        st.rows_filtered += 1
                    elif w is _INVALID:
                        st.reject(line_no, MalformedMunicipality.reason, f"cannot route municipality {g!r}")
                        if config.strict:
                            raise StrictModeError(kind, line_no, MalformedMunicipality.reason)
                    else:
                        w.writerow((g, line_no) + vals)
        except OSError as exc:
            raise InputError(f"cannot read {kind} input {path}: {exc}") from exc
        except UnicodeDecodeError as exc:
            raise InputError(f"{kind} input {path} does not match encoding {mapping.encoding}: {exc}") from exc
        except MappingError as exc:
            raise InputError(f"{kind} input {path}: {exc}") from exc
        finally:
            buckets.update(writer.close())

    derive_faces = mappings.faces.derive_municipality

    def face_geocode(vals):
        g = vals[1] or (municipality_prefix(vals[0].strip()) if derive_faces else "")
        g = g.strip()
        if face_muni is not None and _valid_geocode(g):
            face_muni.setdefault(vals[0].strip(), g)
        return g

    def species_geocode(vals):
        if vals[3]:
            return vals[3].strip()
        code = vals[0].strip()
        if sp_map.derive_municipality:
            return municipality_prefix(code)
        g = face_muni.get(code)
        if g is None:
            # no geometry for this face anywhere: counted as an orphan address
            orphans[code] = orphans.get(code, 0) + 1
        return g

    orphans: Dict[str, int] = {}
    route("faces", config.faces, face_geocode)
    route("species", config.species, species_geocode)
    route("establishments", config.establishments, lambda vals: vals[1].strip())
    return sorted(buckets), stats, orphans


# -- per-bucket processing ------------------------------------------------


def _read_bucket(work: str, kind: str, bucket: int) -> Dict[str, list]:
    groups: Dict[str, list] = {}
    path = bucket_path(work, kind, bucket)
    if not os.path.exists(path):
        return groups
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for row in csv.reader(fh):
            g = row[0]
            lst = groups.get(g)
            if lst is None:
                lst = groups[g] = []
            lst.append((int(row[1]), tuple(row[2:])))
    return groups


def _load_trim():
    try:
        return ctypes.CDLL(ctypes.util.find_library("c") or "libc.so.6").malloc_trim
    except (OSError, AttributeError):
        return None


_malloc_trim = _load_trim()


def release_heap() -> None:
    """Hand freed heap pages back to the OS (glibc only; no-op elsewhere).

    Per-municipality working sets are freed between buckets, but small
    survivors fragment the heap and would let RSS creep with input size.
    """
    if _malloc_trim is not None:
        _malloc_trim(0)


def process_bucket(task) -> List[Tuple[str, RunReport]]:
    bucket, settings = task
    faces = _read_bucket(settings.work, "faces", bucket)
    species = _read_bucket(settings.work, "species", bucket)
    estabs = _read_bucket(settings.work, "establishments", bucket)
    out = []
    for g in sorted(set(faces) | set(species) | set(estabs)):
        rows = (faces.pop(g, []), species.pop(g, []), estabs.pop(g, []))
        try:
            report = process_municipality(g, *rows, settings)
        except StrictModeError:
            raise
        except Exception as exc:  # a failing municipality is skipped and reported
            if settings.strict:
                raise
            log.warning("municipality %s failed: %s", g, exc)
            report = RunReport(rounding=settings.rounding)
            report.failed_municipalities.append((g, f"{type(exc).__name__}: {exc}"))
        out.append((g, report))
    del faces, species, estabs
    release_heap()
    return out


def process_municipality(geocode, face_rows, species_rows, estab_rows, settings: WorkerSettings) -> RunReport:
    st_f, st_s, st_e = IngestStats(), IngestStats(), IngestStats()
    faces = list(validate_faces(face_rows, st_f, settings.derive_face_municipality, settings.strict))
    face_map = {f.face_code: f for f in faces}

    orphan_faces: set = set()
    orphan_rows = 0
    addresses = []
    for rec in validate_species(species_rows, st_s, settings.strict):
        if rec[0] in face_map:
            addresses.append(rec)
        else:
            orphan_faces.add(rec[0])
            orphan_rows += 1
    tallies = build_tallies(addresses)
    del addresses

    establishments = list(
        validate_establishments(estab_rows, st_e, settings.sectors, settings.strict, year=settings.year)
    )
    index = build_index(faces, tallies)
    result = allocate_partition(establishments, index, settings.matrix, tallies, settings.rounding)

    bbox = settings.bboxes.get(geocode)
    warnings = []
    points = []
    for face_code, cep, nonres, jobs in result.rows:
        (lon, lat), _ = representative_point(face_map[face_code].geometry)
        if bbox is not None and validate_coords((lon, lat), bbox) is not Verdict.OK:
            warnings.append((face_code, Verdict.WARN.value))
        points.append(JobPoint(face_code, cep, nonres, jobs, lon, lat))

    report = RunReport(
        input_jobs_total=result.input_jobs,
        allocated_jobs_total=result.allocated_jobs,
        unallocated=result.unallocated,
        rule_histogram=result.rule_histogram,
        per_municipality_totals={geocode: (result.input_jobs, result.allocated_jobs)},
        ingest={"faces": st_f, "species": st_s, "establishments": st_e},
        degenerate_faces=[f.face_code for f in faces if f.degenerate],
        coordinate_warnings=warnings,
        orphan_species_faces=len(orphan_faces),
        orphan_species_rows=orphan_rows,
        filtered_establishments=st_e.rows_filtered,
        rounding=settings.rounding,
    )
    if settings.combined:
        _write_fragment(os.path.join(settings.work, "frag", f"{geocode}.tsv"), points)
    else:
        d = os.path.join(settings.out, geocode)
        os.makedirs(d, exist_ok=True)
        write_outputs(d, points)
        write_reports(d, report)
    return report


def write_outputs(directory: str, points: List[JobPoint]) -> None:
    with open(os.path.join(directory, "jobs.csv"), "wb") as c, open(os.path.join(directory, "jobs.geojson"), "wb") as g:
        export.write_csv_and_geojson(points, c, g)


def write_reports(directory: str, report: RunReport) -> None:
    with open(os.path.join(directory, "report.json"), "wb") as fh:
        export.write_report(report, fh, "json")
    with open(os.path.join(directory, "report.txt"), "wb") as fh:
        export.write_report(report, fh, "text")


# -- combined national output ---------------------------------------------


def _write_fragment(path: str, points: List[JobPoint]) -> None:
    points = sorted(points, key=JobPoint.sort_key)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for p in points:
            fh.write(f"{export.csv_line(p)}\t{export.geojson_feature(p)}\n")


def _fragment_key(line: str):
    face, cep, _ = line.split(",", 2)
    return (face_sort_key(face), cep)


def _merge_files(paths: List[str], dest: str) -> None:
    handles = [open(p, "r", encoding="utf-8", newline="\n") for p in paths]
    try:
        with open(dest, "w", encoding="utf-8", newline="\n") as out:
            out.writelines(heapq.merge(*handles, key=_fragment_key))
    finally:
        for h in handles:
            h.close()


def merge_fragments(frag_dir: str, out_dir: str) -> None:
    """k-way merge of sorted per-municipality fragments into one CSV and GeoJSON."""
    paths = sorted(os.path.join(frag_dir, f) for f in os.listdir(frag_dir))
    level = 0
    while len(paths) > MERGE_FAN_IN:
        nxt = []
        for i in range(0, len(paths), MERGE_FAN_IN):
            dest = os.path.join(frag_dir, f"merge{level}.{i // MERGE_FAN_IN:05d}.part")
            _merge_files(paths[i : i + MERGE_FAN_IN], dest)
            nxt.append(dest)
        paths, level = nxt, level + 1
    merged = os.path.join(frag_dir, "all.merged")
    _merge_files(paths, merged)
    with open(merged, "r", encoding="utf-8", newline="\n") as src, open(
        os.path.join(out_dir, "jobs.csv"), "wb"
    ) as csv_out, open(os.path.join(out_dir, "jobs.geojson"), "wb") as geo_out:
        csv_out.write((export.CSV_HEADER + "\n").encode())
        geo_out.write(export.GEOJSON_HEAD.encode())
        first = True
        for line in src:
            csv_part, feature = line.rstrip("\n").split("\t", 1)
            csv_out.write((csv_part + "\n").encode())
            geo_out.write((("\n" if first else ",\n") + feature).encode())
            first = False
        geo_out.write((("" if first else "\n") + export.GEOJSON_TAIL + "\n").encode())


# -- entry points ---------------------------------------------------------


def run(config: RunConfig) -> RunReport:
    config.validate()
    mappings = config.mapping_set()
    matrix = CompatibilityMatrix.from_dict(config.compatibility)
    os.makedirs(config.out, exist_ok=True)
    work = os.path.join(config.out, ".work")
    shutil.rmtree(work, ignore_errors=True)
    os.makedirs(work)
    try:
        total = sum(os.path.getsize(p) for p in (config.faces, config.species, config.establishments))
        n_buckets = max(1, math.ceil(total / config.bucket_bytes))
        buckets, route_stats, orphans = partition_inputs(config, mappings, work, n_buckets)
        log.info("partitioned %d bytes into %d buckets", total, len(buckets))
        if config.combined:
            os.makedirs(os.path.join(work, "frag"))

        settings = WorkerSettings(
            derive_face_municipality=mappings.faces.derive_municipality,
            sectors=mappings.sectors,
            matrix=matrix,
            rounding=config.rounding,
            year=config.year,
            strict=config.strict,
            out=config.out,
            combined=config.combined,
            work=work,
            bboxes={str(k): tuple(v) for k, v in (config.bboxes or {}).items()},
        )
        tasks = [(b, settings) for b in buckets]
        report = RunReport(rounding=config.rounding)
        for kind in KINDS:
            report.ingest[kind] = route_stats[kind]
        # merging is order-independent (exact sums, sorted at export), so
        # reports are folded in as they arrive instead of being held
        if config.jobs == 1 or len(tasks) <= 1:
            for chunk in map(process_bucket, tasks):
                for _, muni_report in chunk:
                    report.merge(muni_report)
        else:
            with ProcessPoolExecutor(max_workers=config.jobs) as pool:
                for chunk in pool.map(process_bucket, tasks):
                    for _, muni_report in chunk:
                        report.merge(muni_report)
        # species rows whose face has no geometry anywhere are valid but ignored
        report.ingest["species"].rows_read += sum(orphans.values())
        report.ingest["species"].rows_accepted += sum(orphans.values())
        report.orphan_species_faces += len(orphans)
        report.orphan_species_rows += sum(orphans.values())

        if config.combined:
            merge_fragments(os.path.join(work, "frag"), config.out)
        write_reports(config.out, report)
        return report
    finally:
        shutil.rmtree(work, ignore_errors=True)


def inspect(config: RunConfig) -> Dict[str, IngestStats]:
    """Read and validate every input without allocating."""
    from .ingest import read_address_species, read_establishments, read_faces

    for key in ("faces", "species", "establishments"):
        path = getattr(config, key)
        if not os.path.isfile(path):
            raise InputError(f"{key} input {path!r} is not a readable file")
    mappings = config.mapping_set()
    out = {}
    readers = {
        "faces": lambda fh: read_faces(fh, mappings.faces),
        "species": lambda fh: read_address_species(fh, mappings.species),
        "establishments": lambda fh: read_establishments(fh, mappings.establishments, mappings.sectors),
    }
    for kind in KINDS:
        try:
            with open(getattr(config, kind), "rb") as fh:
                it, stats = readers[kind](fh)
                for _ in it:
                    pass
        except (MappingError, UnicodeDecodeError) as exc:
            raise InputError(f"{kind}: {exc}") from exc
        out[kind] = stats
    return out
