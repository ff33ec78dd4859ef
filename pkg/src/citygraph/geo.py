"""Geodesy primitives, direction quantization and Morton cell indexing.

All distances are great-circle distances on a sphere of radius 6,371 km.
Point-to-geometry math runs in a local equirectangular projection centred on
the query point, which is accurate to well under 0.1% at city scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ConfigError, InvalidCoordinate, InvalidGeometry, UndefinedBearing

EARTH_RADIUS_M = 6_371_000.0
METERS_PER_DEGREE = math.pi * EARTH_RADIUS_M / 180.0

CARDINALS = ("N", "NE", "E", "SE", "S", "SW", "W", "NW")
CARDINAL_WORDS = {
    "N": "north",
    "NE": "northeast",
    "E": "east",
    "SE": "southeast",
    "S": "south",
    "SW": "southwest",
    "W": "west",
    "NW": "northwest",
}

MAX_CELL_LEVEL = 24
DEFAULT_CELL_LEVEL = 14


@dataclass(frozen=True, slots=True)
class GeoPoint:
    lon: float
    lat: float

    def __post_init__(self):
        lon, lat = self.lon, self.lat
        if not (math.isfinite(lon) and math.isfinite(lat)):
            raise InvalidCoordinate(f"non-finite coordinate ({lon}, {lat})")
        if not (-180.0 <= lon <= 180.0 and -90.0 <= lat <= 90.0):
            raise InvalidCoordinate(f"coordinate out of range ({lon}, {lat})")

    def __iter__(self):
        yield self.lon
        yield self.lat


POINT = "Point"
LINESTRING = "LineString"
POLYGON = "Polygon"


@dataclass(frozen=True, slots=True)
class Geometry:
    """A Point, LineString or single-ring Polygon.

    Polygon rings must be closed (first vertex repeated at the end).
    """

    kind: str
    points: tuple

    def __post_init__(self):
        pts = tuple(self.points)
        object.__setattr__(self, "points", pts)
        if not pts:
            raise InvalidGeometry("empty geometry")
        if self.kind == POINT:
            if len(pts) != 1:
                raise InvalidGeometry("Point must have exactly one coordinate")
        elif self.kind == LINESTRING:
            if len(pts) < 2:
                raise InvalidGeometry("LineString needs at least 2 points")
        elif self.kind == POLYGON:
            if len(pts) < 4:
                raise InvalidGeometry("Polygon ring needs at least 4 points")
            if pts[0] != pts[-1]:
                raise InvalidGeometry("Polygon ring is not closed")
        else:
            raise InvalidGeometry(f"unsupported geometry type {self.kind!r}")

    @classmethod
    def point(cls, lon, lat):
        return cls(POINT, (GeoPoint(lon, lat),))

    @classmethod
    def linestring(cls, coords):
        return cls(LINESTRING, tuple(GeoPoint(x, y) for x, y in coords))

    @classmethod
    def polygon(cls, coords):
        return cls(POLYGON, tuple(GeoPoint(x, y) for x, y in coords))

    def coords(self):
        return [(p.lon, p.lat) for p in self.points]

    def segments(self):
        """Endpoint arrays (alon, alat, blon, blat); a Point yields one degenerate segment."""
        arr = np.array(self.coords(), dtype=float)
        if len(arr) == 1:
            return arr[:, 0], arr[:, 1], arr[:, 0], arr[:, 1]
        return arr[:-1, 0], arr[:-1, 1], arr[1:, 0], arr[1:, 1]

    def anchor(self) -> GeoPoint:
        """Representative point: the point, the length midpoint, or the ring centroid."""
        if self.kind == POINT:
            return self.points[0]
        if self.kind == LINESTRING:
            return _line_midpoint(self.points)
        return _ring_centroid(self.points)

    def bbox(self):
        lons = [p.lon for p in self.points]
        lats = [p.lat for p in self.points]
        return min(lons), min(lats), max(lons), max(lats)


def _line_midpoint(points):
    lengths = [haversine_m(a, b) for a, b in zip(points, points[1:])]
    total = sum(lengths)
    if total == 0.0:
        return points[0]
    half = total / 2.0
    run = 0.0
    for (a, b), seg in zip(zip(points, points[1:]), lengths):
        if run + seg >= half and seg > 0:
            t = (half - run) / seg
            return GeoPoint(a.lon + t * (b.lon - a.lon), a.lat + t * (b.lat - a.lat))
        run += seg
    return points[-1]


def _ring_centroid(points):
    ref = points[0]
    c = math.cos(math.radians(ref.lat))
    xs = [(p.lon - ref.lon) * c for p in points]
    ys = [p.lat - ref.lat for p in points]
    area2 = 0.0
    cx = cy = 0.0
    for i in range(len(points) - 1):
        cross = xs[i] * ys[i + 1] - xs[i + 1] * ys[i]
        area2 += cross
        cx += (xs[i] + xs[i + 1]) * cross
        cy += (ys[i] + ys[i + 1]) * cross
    if abs(area2) < 1e-18:
        n = len(points) - 1
        return GeoPoint(sum(p.lon for p in points[:-1]) / n, sum(p.lat for p in points[:-1]) / n)
    cx /= 3.0 * area2
    cy /= 3.0 * area2
    return GeoPoint(ref.lon + cx / c, ref.lat + cy)


# --- distances and bearings -------------------------------------------------


def haversine_m(a: GeoPoint, b: GeoPoint) -> float:
    """Great-circle distance in meters."""
    for p in (a, b):
        if not (math.isfinite(p.lon) and math.isfinite(p.lat)):
            raise InvalidCoordinate(f"non-finite coordinate {p}")
    if a.lon == b.lon and a.lat == b.lat:
        return 0.0
    phi1, phi2 = math.radians(a.lat), math.radians(b.lat)
    dphi = phi2 - phi1
    dlmb = math.radians(b.lon - a.lon)
    h = math.sin(dphi / 2) ** 2 + math.cos(phi1) * math.cos(phi2) * math.sin(dlmb / 2) ** 2
    # symmetric in (a, b): sin^2 and the cos product commute exactly
    return 2.0 * EARTH_RADIUS_M * math.asin(min(1.0, math.sqrt(h)))


def haversine_np(lon1, lat1, lon2, lat2):
    lon1, lat1, lon2, lat2 = (np.asarray(v, dtype=float) for v in (lon1, lat1, lon2, lat2))
    phi1 = np.radians(lat1)
    phi2 = np.radians(lat2)
    h = np.sin((phi2 - phi1) / 2) ** 2 + np.cos(phi1) * np.cos(phi2) * np.sin(np.radians(lon2 - lon1) / 2) ** 2
    return 2.0 * EARTH_RADIUS_M * np.arcsin(np.minimum(1.0, np.sqrt(h)))


def initial_bearing_deg(a: GeoPoint, b: GeoPoint) -> float:
    """Initial great-circle bearing from a to b, clockwise from north, in [0, 360)."""
    if a.lon == b.lon and a.lat == b.lat:
        raise UndefinedBearing(f"bearing undefined for coincident points {a}")
    phi1, phi2 = math.radians(a.lat), math.radians(b.lat)
    dlmb = math.radians(b.lon - a.lon)
    y = math.sin(dlmb) * math.cos(phi2)
    x = math.cos(phi1) * math.sin(phi2) - math.sin(phi1) * math.cos(phi2) * math.cos(dlmb)
    deg = math.degrees(math.atan2(y, x)) % 360.0
    return 0.0 if deg >= 360.0 else deg


def bearing_np(lon1, lat1, lon2, lat2):
    """Vectorised initial bearing in [0, 360); coincident pairs give 0."""
    phi1 = np.radians(np.asarray(lat1, dtype=float))
    phi2 = np.radians(np.asarray(lat2, dtype=float))
    dlmb = np.radians(np.asarray(lon2, dtype=float) - np.asarray(lon1, dtype=float))
    y = np.sin(dlmb) * np.cos(phi2)
    x = np.cos(phi1) * np.sin(phi2) - np.sin(phi1) * np.cos(phi2) * np.cos(dlmb)
    deg = np.degrees(np.arctan2(y, x)) % 360.0
    return np.where(deg >= 360.0, 0.0, deg)


def destination_point(p: GeoPoint, distance_m: float, bearing_deg: float) -> GeoPoint:
    """Point reached by travelling distance_m from p along the given initial bearing."""
    delta = distance_m / EARTH_RADIUS_M
    theta = math.radians(bearing_deg)
    phi1 = math.radians(p.lat)
    lmb1 = math.radians(p.lon)
    phi2 = math.asin(math.sin(phi1) * math.cos(delta) + math.cos(phi1) * math.sin(delta) * math.cos(theta))
    lmb2 = lmb1 + math.atan2(
        math.sin(theta) * math.sin(delta) * math.cos(phi1),
        math.cos(delta) - math.sin(phi1) * math.sin(phi2),
    )
    lon = (math.degrees(lmb2) + 540.0) % 360.0 - 180.0
    return GeoPoint(lon, math.degrees(phi2))


def cardinal8(bearing_deg: float) -> str:
    if not (math.isfinite(bearing_deg) and 0.0 <= bearing_deg < 360.0):
        raise ValueError(f"bearing {bearing_deg} outside [0, 360)")
    return CARDINALS[int(((bearing_deg + 22.5) % 360.0) // 45.0)]


@dataclass(frozen=True, slots=True)
class Transition:
    """A (distance, direction) hop; bearing and cardinal are None for zero distance."""

    distance_m: float
    bearing_deg: Optional[float]
    cardinal: Optional[str]

    def __post_init__(self):
        if not (math.isfinite(self.distance_m) and self.distance_m >= 0):
            raise ValueError(f"invalid transition distance {self.distance_m}")
        if (self.bearing_deg is None) != (self.cardinal is None):
            raise ValueError("bearing and cardinal must both be set or both be None")
        if self.bearing_deg is not None and not (0.0 <= self.bearing_deg < 360.0):
            raise ValueError(f"invalid transition bearing {self.bearing_deg}")

    @classmethod
    def between(cls, a: GeoPoint, b: GeoPoint) -> "Transition":
        d = haversine_m(a, b)
        if d == 0.0:
            return cls(0.0, None, None)
        theta = initial_bearing_deg(a, b)
        return cls(d, theta, cardinal8(theta))


def reverse_bearing(bearing_deg: float) -> float:
    out = (bearing_deg + 180.0) % 360.0
    return 0.0 if out >= 360.0 else out


# --- point to geometry -------------------------------------------------------


def feet_on_segments(plon, plat, alon, alat, blon, blat):
    """Closest points on segments [a, b] to p, in a local projection centred on p.

    Inputs broadcast against each other; returns (foot_lon, foot_lat).
    """
    plon, plat = np.asarray(plon, dtype=float), np.asarray(plat, dtype=float)
    c = np.cos(np.radians(plat))
    ax = (np.asarray(alon) - plon) * c
    ay = np.asarray(alat) - plat
    bx = (np.asarray(blon) - plon) * c
    by = np.asarray(blat) - plat
    dx = bx - ax
    dy = by - ay
    len2 = dx * dx + dy * dy
    with np.errstate(invalid="ignore", divide="ignore"):
        t = np.where(len2 > 0, -(ax * dx + ay * dy) / np.where(len2 > 0, len2, 1.0), 0.0)
    t = np.clip(t, 0.0, 1.0)
    fx = ax + t * dx
    fy = ay + t * dy
    return plon + fx / c, plat + fy


def point_geometry_distances(plon, plat, alon, alat, blon, blat):
    """Distances from p to the segment feet and to both segment endpoints.

    Returns (dist, lon, lat) arrays of shape (3, ...) stacked as feet, a, b.
    The endpoint rows make the minimum never exceed any vertex distance.
    """
    flon, flat = feet_on_segments(plon, plat, alon, alat, blon, blat)
    shape = np.broadcast(plon, alon).shape
    lons = np.stack([np.broadcast_to(flon, shape), np.broadcast_to(alon, shape), np.broadcast_to(blon, shape)])
    lats = np.stack([np.broadcast_to(flat, shape), np.broadcast_to(alat, shape), np.broadcast_to(blat, shape)])
    d = haversine_np(plon, plat, lons, lats)
    return d, lons, lats


def point_to_geometry_m(p: GeoPoint, g: Geometry):
    """Minimum distance from p to g (segments, or polygon boundary) and the foot point."""
    if g is None or not g.points:
        raise InvalidGeometry("empty geometry")
    alon, alat, blon, blat = g.segments()
    d, lons, lats = point_geometry_distances(p.lon, p.lat, alon, alat, blon, blat)
    flat_idx = int(np.argmin(d))
    k, j = np.unravel_index(flat_idx, d.shape)
    dist = float(d[k, j])
    if dist == 0.0:
        return 0.0, p
    return dist, GeoPoint(float(lons[k, j]), float(lats[k, j]))


def point_in_polygon(p: GeoPoint, g: Geometry) -> bool:
    """Even-odd rule; points on the boundary count as outside."""
    if g.kind != POLYGON:
        return False
    inside = False
    pts = g.points
    x, y = p.lon, p.lat
    for a, b in zip(pts, pts[1:]):
        if (a.lat > y) != (b.lat > y):
            xc = a.lon + (y - a.lat) * (b.lon - a.lon) / (b.lat - a.lat)
            if x < xc:
                inside = not inside
    return inside


def _segment_intersection(p1, p2, q1, q2):
    """Intersection point of two projected segments, or None.

    Points are (x, y) tuples in a common planar frame.
    """
    rx, ry = p2[0] - p1[0], p2[1] - p1[1]
    sx, sy = q2[0] - q1[0], q2[1] - q1[1]
    denom = rx * sy - ry * sx
    qpx, qpy = q1[0] - p1[0], q1[1] - p1[1]
    if denom == 0.0:
        return None
    t = (qpx * sy - qpy * sx) / denom
    u = (qpx * ry - qpy * rx) / denom
    if 0.0 <= t <= 1.0 and 0.0 <= u <= 1.0:
        return p1[0] + t * rx, p1[1] + t * ry
    return None


def segment_crossings(g1: Geometry, g2: Geometry):
    """All points where a segment of g1 crosses a segment of g2, in g1-segment order."""
    ref = g1.points[0]
    c = math.cos(math.radians(ref.lat))

    def proj(p):
        return ((p.lon - ref.lon) * c, p.lat - ref.lat)

    a = [proj(p) for p in g1.points]
    b = [proj(p) for p in g2.points]
    out = []
    for i in range(len(a) - 1):
        for j in range(len(b) - 1):
            hit = _segment_intersection(a[i], a[i + 1], b[j], b[j + 1])
            if hit is not None:
                out.append(GeoPoint(ref.lon + hit[0] / c, ref.lat + hit[1]))
    return out


def geometry_gap_m(g1: Geometry, g2: Geometry):
    """Minimum distance between two geometries and a closest pair (p1 on g1, p2 on g2).

    Crossing geometries have distance 0 at their first crossing point.
    """
    if g1.kind != POINT and g2.kind != POINT:
        hits = segment_crossings(g1, g2)
        if hits:
            return 0.0, hits[0], hits[0]
    best = (math.inf, None, None)
    for v in g1.points:
        d, foot = point_to_geometry_m(v, g2)
        if d < best[0]:
            best = (d, v, foot)
    for v in g2.points:
        d, foot = point_to_geometry_m(v, g1)
        if d < best[0]:
            best = (d, foot, v)
    return best


# --- Morton cells ------------------------------------------------------------


@dataclass(frozen=True, slots=True, order=True)
class CellId:
    level: int
    code: int

    def parent(self) -> "CellId":
        if self.level == 0:
            raise ConfigError("level-0 cell has no parent")
        return CellId(self.level - 1, self.code >> 2)

    def xy(self):
        return deinterleave(self.code)

    def contains(self, other: "CellId") -> bool:
        if other.level < self.level:
            return False
        return other.code >> (2 * (other.level - self.level)) == self.code


def _spread(v: int) -> int:
    v &= 0xFFFFFFFF
    v = (v | (v << 16)) & 0x0000FFFF0000FFFF
    v = (v | (v << 8)) & 0x00FF00FF00FF00FF
    v = (v | (v << 4)) & 0x0F0F0F0F0F0F0F0F
    v = (v | (v << 2)) & 0x3333333333333333
    v = (v | (v << 1)) & 0x5555555555555555
    return v


def _compact(v: int) -> int:
    v &= 0x5555555555555555
    v = (v | (v >> 1)) & 0x3333333333333333
    v = (v | (v >> 2)) & 0x0F0F0F0F0F0F0F0F
    v = (v | (v >> 4)) & 0x00FF00FF00FF00FF
    v = (v | (v >> 8)) & 0x0000FFFF0000FFFF
    v = (v | (v >> 16)) & 0x00000000FFFFFFFF
    return v


def interleave(x: int, y: int) -> int:
    """Morton code with x (longitude) bits on even positions and y on odd."""
    return _spread(x) | (_spread(y) << 1)


def deinterleave(code: int):
    return _compact(code), _compact(code >> 1)


def quantize(lon: float, lat: float, level: int):
    """Integer cell column/row of (lon, lat) at the given level."""
    full = 1 << MAX_CELL_LEVEL
    x = min(int(math.floor((lon + 180.0) / 360.0 * full)), full - 1)
    y = min(int(math.floor((lat + 90.0) / 180.0 * full)), full - 1)
    shift = MAX_CELL_LEVEL - level
    return x >> shift, y >> shift


def quantize_np(lon, lat, level: int):
    full = 1 << MAX_CELL_LEVEL
    x = np.minimum(np.floor((np.asarray(lon) + 180.0) / 360.0 * full).astype(np.int64), full - 1)
    y = np.minimum(np.floor((np.asarray(lat) + 90.0) / 180.0 * full).astype(np.int64), full - 1)
    shift = MAX_CELL_LEVEL - level
    return x >> shift, y >> shift


def _check_level(level):
    if not isinstance(level, (int, np.integer)) or not 0 <= level <= MAX_CELL_LEVEL:
        raise ConfigError(f"cell level must be an integer in [0, {MAX_CELL_LEVEL}], got {level!r}")


def cell_id(p: GeoPoint, level: int = DEFAULT_CELL_LEVEL) -> CellId:
    _check_level(level)
    x, y = quantize(p.lon, p.lat, level)
    return CellId(int(level), interleave(x, y))


def cell_bounds(c: CellId):
    """(min_lon, min_lat, max_lon, max_lat) of a cell."""
    x, y = c.xy()
    n = 1 << c.level
    return (
        -180.0 + 360.0 * x / n,
        -90.0 + 180.0 * y / n,
        -180.0 + 360.0 * (x + 1) / n,
        -90.0 + 180.0 * (y + 1) / n,
    )


def cell_neighbors(c: CellId):
    """Face and corner neighbours at the same level, without wrap-around."""
    x, y = c.xy()
    n = 1 << c.level
    out = []
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dx == 0 and dy == 0:
                continue
            nx, ny = x + dx, y + dy
            if 0 <= nx < n and 0 <= ny < n:
                out.append(CellId(c.level, interleave(nx, ny)))
    return out


def cell_size_m(level: int, lat: float = 0.0):
    """Approximate (width, height) of a cell in meters at the given latitude."""
    n = 1 << level
    return (360.0 / n) * METERS_PER_DEGREE * math.cos(math.radians(lat)), (180.0 / n) * METERS_PER_DEGREE


def level_for_spacing(spacing_m: float, max_abs_lat: float) -> int:
    """Finest level whose cells are at least spacing_m wide and tall at max_abs_lat."""
    for level in range(MAX_CELL_LEVEL, -1, -1):
        w, h = cell_size_m(level, min(max_abs_lat, 89.0))
        if w >= spacing_m and h >= spacing_m:
            return level
    return 0


def as_points(coords: Iterable[Sequence[float]]):
    return [GeoPoint(float(x), float(y)) for x, y in coords]
