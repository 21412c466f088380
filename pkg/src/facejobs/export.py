"""CSV, GeoJSON and run-report writers.

The CSV layout is fixed::

    cod_face,CEP,non residencial,jobs,lon,lat

Rows are ordered by face code then CEP, use LF line endings, and print
numbers without trailing zeros (jobs rounded half-even to 6 decimals).
Every writer produces byte-identical output for identical input.
"""

from __future__ import annotations

import csv
import io
import json
from fractions import Fraction
from typing import IO, Iterable, List

from .model import JobPoint, Rational, Rule, RunReport

CSV_HEADER = "cod_face,CEP,non residencial,jobs,lon,lat"
CSV_COLUMNS = tuple(CSV_HEADER.split(","))
JOBS_DECIMALS = 6
COORD_DECIMALS = 6
_SCALE = 10**JOBS_DECIMALS
_CHUNK = 4096


class SinkFailure(IOError):
    pass


def format_jobs(x: Rational) -> str:
    """Decimal rendering with at most 6 places, half-even, no trailing zeros."""
    if isinstance(x, int):
        return str(x)
    num, den = x.numerator, x.denominator
    sign = "-" if num < 0 else ""
    scaled, rem = divmod(abs(num) * _SCALE, den)
    twice = 2 * rem
    if twice > den or (twice == den and scaled % 2):
        scaled += 1
    q, r = divmod(scaled, _SCALE)
    if r == 0:
        return f"{sign}{q}" if q else "0"
    return f"{sign}{q}.{r:06d}".rstrip("0")


def format_coord(x: float) -> str:
    s = f"{x:.{COORD_DECIMALS}f}".rstrip("0").rstrip(".")
    return "0" if s in ("-0", "") else s


def exact_str(x: Rational) -> str:
    return str(x)


def parse_exact(s: str) -> Rational:
    v = Fraction(s)
    return v.numerator if v.denominator == 1 else v


def _formatted(p: JobPoint) -> tuple:
    return (p.face_code, p.cep, str(p.non_residential), format_jobs(p.jobs), format_coord(p.lon), format_coord(p.lat))


def _csv_text(f: tuple) -> str:
    return ",".join(f)


def _feature_text(f: tuple) -> str:
    # face codes and CEPs are digit strings, so no JSON escaping is needed
    face, cep, nonres, jobs, lon, lat = f
    return (
        f'{{"type":"Feature","geometry":{{"type":"Point","coordinates":[{lon},{lat}]}},'
        f'"properties":{{"cod_face":"{face}","CEP":"{cep}","non_residencial":{nonres},"jobs":{jobs}}}}}'
    )


def csv_line(p: JobPoint) -> str:
    return _csv_text(_formatted(p))


def geojson_feature(p: JobPoint) -> str:
    return _feature_text(_formatted(p))


def _ordered(rows: Iterable[JobPoint]) -> List[JobPoint]:
    return sorted(rows, key=JobPoint.sort_key)


def _write_lines(sink: IO[bytes], lines: Iterable[str]) -> None:
    buf: list = []
    try:
        for line in lines:
            buf.append(line)
            if len(buf) >= _CHUNK:
                sink.write(("\n".join(buf) + "\n").encode("utf-8"))
                buf.clear()
        if buf:
            sink.write(("\n".join(buf) + "\n").encode("utf-8"))
    except OSError as exc:
        raise SinkFailure(str(exc)) from exc


def write_csv(rows: Iterable[JobPoint], sink: IO[bytes]) -> int:
    ordered = _ordered(rows)
    _write_lines(sink, [CSV_HEADER] + [csv_line(p) for p in ordered])
    return len(ordered)


def read_csv(source: IO[bytes]) -> List[JobPoint]:
    """Parse a CSV written by :func:`write_csv`; jobs come back as exact decimals."""
    text = io.TextIOWrapper(source, encoding="utf-8", newline="")
    reader = csv.reader(text)
    header = next(reader, None)
    if header is None or tuple(header) != CSV_COLUMNS:
        raise ValueError(f"unexpected CSV header {header!r}")
    out = []
    for row in reader:
        if not row:
            continue
        face, cep, nonres, jobs, lon, lat = row
        out.append(JobPoint(face, cep, int(nonres), parse_exact(jobs), float(lon), float(lat)))
    text.detach()
    return out


GEOJSON_HEAD = '{"type":"FeatureCollection","features":['
GEOJSON_TAIL = "]}"


def _geojson_text(features: List[str]) -> str:
    return GEOJSON_HEAD + ("\n" + ",\n".join(features) + "\n" if features else "") + GEOJSON_TAIL


def write_geojson(rows: Iterable[JobPoint], sink: IO[bytes]) -> int:
    ordered = _ordered(rows)
    _write_lines(sink, [_geojson_text([geojson_feature(p) for p in ordered])])
    return len(ordered)


def write_csv_and_geojson(rows: Iterable[JobPoint], csv_sink: IO[bytes], geojson_sink: IO[bytes]) -> int:
    """Same bytes as :func:`write_csv` plus :func:`write_geojson`, formatting each row once."""
    fields = [_formatted(p) for p in _ordered(rows)]
    _write_lines(csv_sink, [CSV_HEADER] + [_csv_text(f) for f in fields])
    _write_lines(geojson_sink, [_geojson_text([_feature_text(f) for f in fields])])
    return len(fields)


def report_to_dict(report: RunReport) -> dict:
    hist = {rule.value: report.rule_histogram.get(rule, 0) for rule in Rule}
    unalloc = sorted(report.unallocated, key=lambda u: (u.municipality, u.establishment_id, u.cep))
    muni_unalloc: dict = {}
    for u in unalloc:
        muni_unalloc[u.municipality] = muni_unalloc.get(u.municipality, 0) + u.jobs
    per_muni = {}
    for geocode in sorted(report.per_municipality_totals):
        inp, alloc = report.per_municipality_totals[geocode]
        left = muni_unalloc.get(geocode, 0)
        per_muni[geocode] = {
            "input_jobs": inp,
            "allocated_jobs": exact_str(alloc),
            "unallocated_jobs": left,
            "conserved": inp == alloc + left,
        }
    return {
        "rounding": report.rounding,
        "conservation": {
            "input_jobs": report.input_jobs_total,
            "allocated_jobs": exact_str(report.allocated_jobs_total),
            "allocated_jobs_decimal": format_jobs(report.allocated_jobs_total),
            "unallocated_jobs": report.unallocated_jobs_total,
            "conserved": report.conserved,
        },
        "establishments": sum(hist.values()),
        "rule_histogram": hist,
        "unallocated": [
            {
                "establishment_id": u.establishment_id,
                "municipality": u.municipality,
                "cep": u.cep,
                "jobs": u.jobs,
                "reason": u.reason,
            }
            for u in unalloc
        ],
        "per_municipality": per_muni,
        "ingest": {name: report.ingest[name].to_dict() for name in sorted(report.ingest)},
        "filtered_establishments": report.filtered_establishments,
        "orphan_species": {"faces": report.orphan_species_faces, "rows": report.orphan_species_rows},
        "degenerate_faces": sorted(report.degenerate_faces),
        "coordinate_warnings": [
            {"face": f, "verdict": v} for f, v in sorted(report.coordinate_warnings)
        ],
        "failed_municipalities": [
            {"municipality": g, "error": msg} for g, msg in sorted(report.failed_municipalities)
        ],
    }


def report_text(report: RunReport) -> str:
    d = report_to_dict(report)
    c = d["conservation"]
    lines = [
        "Job allocation run report",
        "=========================",
        f"rounding mode          : {d['rounding']}",
        f"establishments         : {d['establishments']}",
        f"input jobs             : {c['input_jobs']}",
        f"allocated jobs         : {c['allocated_jobs_decimal']} (exact {c['allocated_jobs']})",
        f"unallocated jobs       : {c['unallocated_jobs']}",
        f"conservation holds     : {'yes' if c['conserved'] else 'NO'}",
        "",
        "Rules applied (establishments)",
    ]
    for rule, n in d["rule_histogram"].items():
        lines.append(f"  {rule:<22} {n}")
    lines += ["", "Ingest"]
    for name, st in d["ingest"].items():
        lines.append(
            f"  {name:<15} read {st['rows_read']}, accepted {st['rows_accepted']}, rejected {st['rows_rejected']}"
        )
        for reason, n in st["rejection_reasons"].items():
            lines.append(f"      {reason}: {n}")
    if d["filtered_establishments"]:
        lines.append(f"  establishments outside year/municipality filter: {d['filtered_establishments']}")
    if d["orphan_species"]["faces"]:
        o = d["orphan_species"]
        lines.append(f"  address rows for faces without geometry: {o['rows']} over {o['faces']} faces (ignored)")
    lines += ["", f"Unallocated establishments: {len(d['unallocated'])}"]
    for u in d["unallocated"][:50]:
        lines.append(f"  {u['establishment_id']} municipality {u['municipality']} CEP {u['cep']}: {u['jobs']} jobs ({u['reason']})")
    if len(d["unallocated"]) > 50:
        lines.append(f"  ... {len(d['unallocated']) - 50} more in the JSON report")
    if d["degenerate_faces"]:
        lines.append(f"Degenerate faces placed at their first vertex: {len(d['degenerate_faces'])}")
    if d["coordinate_warnings"]:
        lines.append(f"Points outside their municipality bounding box: {len(d['coordinate_warnings'])}")
    if d["failed_municipalities"]:
        lines.append("Failed municipalities (skipped):")
        for f in d["failed_municipalities"]:
            lines.append(f"  {f['municipality']}: {f['error']}")
    lines += ["", "Per-municipality conservation", "  geocode   input     allocated      unallocated  ok"]
    for geocode, row in d["per_municipality"].items():
        lines.append(
            f"  {geocode}  {row['input_jobs']:<9} {format_jobs(parse_exact(row['allocated_jobs'])):<14} "
            f"{row['unallocated_jobs']:<12} {'yes' if row['conserved'] else 'NO'}"
        )
    lines.append(
        "\nNote: jobs are spread in proportion to non-residential address counts, which tends to "
        "overstate jobs in service areas and understate them in industrial districts, most of all "
        "in single-CEP municipalities."
    )
    return "\n".join(lines) + "\n"


def write_report(report: RunReport, sink: IO[bytes], fmt: str = "json") -> None:
    if fmt not in ("json", "text"):
        raise ValueError(f"unknown report format {fmt!r}")
    # Streamed through a wrapper so a large report never exists as one string.
    out = io.TextIOWrapper(sink, encoding="utf-8", newline="\n", write_through=True)
    try:
        if fmt == "json":
            json.dump(report_to_dict(report), out, indent=2)
            out.write("\n")
        else:
            out.write(report_text(report))
        out.flush()
    except OSError as exc:
        raise SinkFailure(str(exc)) from exc
    finally:
        out.detach()
