"""Representative points for street faces.

Lengths are planar, measured in degree space. Faces are block-scale
(~100 m), so the anisotropy between longitude and latitude degrees moves
the half-length point by far less than the CEP-level uncertainty of the
allocation itself.
"""

from __future__ import annotations

import enum
import math
from typing import Optional, Sequence, Tuple

from .model import Geometry, MalformedGeometry

Point = Tuple[float, float]
BBox = Tuple[float, float, float, float]  # min_lon, min_lat, max_lon, max_lat


class DegenerateGeometry(ValueError):
    pass


class Verdict(str, enum.Enum):
    OK = "Ok"
    WARN = "Warn"
    INVALID = "Invalid"


def _parse_pairs(body: str) -> list:
    try:
        return [(float(x), float(y)) for x, y in map(str.split, body.split(","))]
    except ValueError:
        raise MalformedGeometry(f"bad coordinate list {body[:40]!r}") from None


def parse_wkt(text: str) -> Geometry:
    """Parse a WKT ``POINT``, ``LINESTRING`` or single-part ``MULTILINESTRING``."""
    s = text.strip()
    open_at = s.find("(")
    if open_at < 0 or not s.endswith(")"):
        raise MalformedGeometry(f"not WKT: {text[:40]!r}")
    kind = s[:open_at].strip().upper()
    body = s[open_at + 1 : -1].strip()
    if kind == "MULTILINESTRING":
        if body.count("(") != 1 or not (body.startswith("(") and body.endswith(")")):
            raise MalformedGeometry("only single-part MULTILINESTRING is supported")
        body = body[1:-1]
        kind = "LINESTRING"
    if "(" in body or ")" in body:
        raise MalformedGeometry(f"unexpected nesting in {kind}")
    pts = _parse_pairs(body)
    if kind == "POINT":
        if len(pts) != 1:
            raise MalformedGeometry("POINT needs exactly one coordinate pair")
    elif kind == "LINESTRING":
        if len(pts) < 2:
            raise MalformedGeometry("LINESTRING needs at least two vertices")
    else:
        raise MalformedGeometry(f"unsupported geometry type {kind!r}")
    _check_world(pts)
    return Geometry(tuple(pts))


def parse_vertex_list(text: str) -> Geometry:
    """Parse ``"lon lat;lon lat;..."``; one vertex means a point."""
    body = text.strip().replace(";", ",")
    if not body:
        raise MalformedGeometry("empty vertex list")
    pts = _parse_pairs(body)
    _check_world(pts)
    return Geometry(tuple(pts))


def _check_world(pts) -> None:
    # NaN fails every comparison and infinities fall outside, so no isfinite needed
    for lon, lat in pts:
        if not (-180.0 <= lon <= 180.0 and -90.0 <= lat <= 90.0):
            raise MalformedGeometry(f"coordinate ({lon}, {lat}) outside WGS84 bounds")


def polyline_length(vertices: Sequence[Point]) -> float:
    return math.fsum(
        math.hypot(x1 - x0, y1 - y0) for (x0, y0), (x1, y1) in zip(vertices, vertices[1:])
    )


def midpoint_along(vertices: Sequence[Point]) -> Point:
    """Point at half the cumulative planar length of the polyline."""
    if len(vertices) < 2:
        raise DegenerateGeometry("polyline needs at least two vertices")
    seglens = [math.hypot(x1 - x0, y1 - y0) for (x0, y0), (x1, y1) in zip(vertices, vertices[1:])]
    total = math.fsum(seglens)
    if not total > 0.0:
        raise DegenerateGeometry("polyline has zero length")
    half = total / 2.0
    walked = 0.0
    last = len(seglens) - 1
    for i, seg in enumerate(seglens):
        if seg > 0.0 and (walked + seg >= half or i == last):
            (x0, y0), (x1, y1) = vertices[i], vertices[i + 1]
            t = min(max((half - walked) / seg, 0.0), 1.0)
            # interpolate from the nearer end so reversed input rounds identically
            if t <= 0.5:
                return (x0 + t * (x1 - x0), y0 + t * (y1 - y0))
            u = 1.0 - t
            return (x1 + u * (x0 - x1), y1 + u * (y0 - y1))
        walked += seg
    x, y = vertices[-1]
    return (x, y)


def representative_point(geometry: Geometry) -> Tuple[Point, bool]:
    """Return ``(point, degenerate)``; degenerate lines fall back to the first vertex."""
    verts = geometry.vertices
    if len(verts) == 1:
        return verts[0], False
    try:
        return midpoint_along(verts), False
    except DegenerateGeometry:
        return verts[0], True


def distance_to_polyline(p: Point, vertices: Sequence[Point]) -> float:
    px, py = p
    if len(vertices) == 1:
        return math.hypot(px - vertices[0][0], py - vertices[0][1])
    best = math.inf
    for (x0, y0), (x1, y1) in zip(vertices, vertices[1:]):
        dx, dy = x1 - x0, y1 - y0
        dd = dx * dx + dy * dy
        t = 0.0 if dd == 0.0 else min(max(((px - x0) * dx + (py - y0) * dy) / dd, 0.0), 1.0)
        best = min(best, math.hypot(px - (x0 + t * dx), py - (y0 + t * dy)))
    return best


def validate_coords(p: Point, municipality_bbox: Optional[BBox] = None) -> Verdict:
    lon, lat = p
    if not (math.isfinite(lon) and math.isfinite(lat)):
        return Verdict.INVALID
    if not (-180.0 <= lon <= 180.0 and -90.0 <= lat <= 90.0):
        return Verdict.INVALID
    if municipality_bbox is not None:
        min_lon, min_lat, max_lon, max_lat = municipality_bbox
        if not (min_lon <= lon <= max_lon and min_lat <= lat <= max_lat):
            return Verdict.WARN
    return Verdict.OK
