"""Rule-based edge derivation, image anchoring and graph validation.

Relation rules (all thresholds come from GraphBuildConfig):

* nearest        viewpoint/POI/transit -> its single closest road within nearest_cutoff_m
* near           road -> POI whenever the POI is within near_threshold_m of the road
* crossing       road -> synthesized intersection, for roads passing within snap_tolerance_m
* on_same_street consecutive POIs along the road they are both nearest to
* bounds         road -> AOI when the road stays outside but within bounds_buffer_m of the ring
* intersects     road -> AOI when the road enters the AOI interior

Candidate pairs come from a uniform cell grid (Morton-quantized, sized to the
largest threshold) so the build is near-linear in the number of nodes.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from . import geo
from .errors import DataError, UnknownNode
from .geo import GeoPoint, Geometry
from .graph import (
    POINT_LIKE,
    EdgeKind,
    GraphBuildConfig,
    GraphEdge,
    GraphNode,
    NodeKind,
    SpatialGraph,
)

log = logging.getLogger(__name__)

EDGE_ORDER = {k: i for i, k in enumerate(EdgeKind)}


class UnanchorableImage(DataError):
    pass


@dataclass
class BuildReport:
    skipped: List[tuple] = field(default_factory=list)  # (node id, reason)
    intersections: int = 0


# --- road segment grid -------------------------------------------------------


class RoadIndex:
    """Uniform-grid index over road segments for radius-bounded point queries."""

    def __init__(self, roads: List[GraphNode], spacing_m: float, max_abs_lat: float):
        self.roads = roads
        alon, alat, blon, blat, owner, start = [], [], [], [], [], []
        cum = []
        for r, node in enumerate(roads):
            sa, sb, ea, eb = node.geometry.segments()
            seglen = geo.haversine_np(sa, sb, ea, eb)
            alon.append(sa)
            alat.append(sb)
            blon.append(ea)
            blat.append(eb)
            owner.append(np.full(len(sa), r, dtype=np.int64))
            cum.append(np.concatenate([[0.0], np.cumsum(seglen)[:-1]]))
        cat = (lambda xs, dt=float: np.concatenate(xs) if xs else np.zeros(0, dtype=dt))
        self.alon, self.alat, self.blon, self.blat = cat(alon), cat(alat), cat(blon), cat(blat)
        self.owner = cat(owner, np.int64)
        self.seg_start = cat(cum)
        self.level = geo.level_for_spacing(spacing_m, max_abs_lat)
        self._register()

    def _register(self):
        level = self.level
        x0, y0 = geo.quantize_np(np.minimum(self.alon, self.blon), np.minimum(self.alat, self.blat), level)
        x1, y1 = geo.quantize_np(np.maximum(self.alon, self.blon), np.maximum(self.alat, self.blat), level)
        nx = x1 - x0 + 1
        cnt = nx * (y1 - y0 + 1)
        seg = np.repeat(np.arange(len(cnt), dtype=np.int64), cnt)
        offs = np.arange(int(cnt.sum()), dtype=np.int64) - np.repeat(np.cumsum(cnt) - cnt, cnt)
        cx = x0[seg] + offs % nx[seg]
        cy = y0[seg] + offs // nx[seg]
        keys = (cx << level) | cy
        order = np.argsort(keys, kind="stable")
        self.keys = keys[order]
        self.key_seg = seg[order]

    def candidate_pairs(self, plon, plat):
        """(point index, segment index) for segments registered in the 3x3 cell block of each point."""
        level = self.level
        n = 1 << level
        px, py = geo.quantize_np(plon, plat, level)
        pts, segs = [], []
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                cx, cy = px + dx, py + dy
                ok = (cx >= 0) & (cx < n) & (cy >= 0) & (cy < n)
                pidx = np.nonzero(ok)[0]
                k = (cx[pidx] << level) | cy[pidx]
                lo = np.searchsorted(self.keys, k, "left")
                hi = np.searchsorted(self.keys, k, "right")
                c = hi - lo
                if c.sum() == 0:
                    continue
                rep = np.repeat(np.arange(len(pidx)), c)
                off = np.arange(int(c.sum())) - np.repeat(np.cumsum(c) - c, c)
                pts.append(pidx[rep])
                segs.append(self.key_seg[lo[rep] + off])
        if not pts:
            return np.zeros(0, np.int64), np.zeros(0, np.int64)
        return np.concatenate(pts), np.concatenate(segs)

    def point_road_distances(self, plon, plat, max_m: float, chunk: int = 50_000):
        """Minimum point-to-road distances for every (point, road) pair within max_m.

        Returns arrays (point, road, dist, foot_lon, foot_lat, along_m) sorted by
        point then road.
        """
        plon = np.asarray(plon, dtype=float)
        plat = np.asarray(plat, dtype=float)
        out = [[] for _ in range(6)]
        for s in range(0, len(plon), chunk):
            cl, ct = plon[s : s + chunk], plat[s : s + chunk]
            pi, si = self.candidate_pairs(cl, ct)
            if len(pi) == 0:
                continue
            d3, lons, lats = geo.point_geometry_distances(
                cl[pi], ct[pi], self.alon[si], self.alat[si], self.blon[si], self.blat[si]
            )
            row = np.argmin(d3, axis=0)
            cols = np.arange(len(pi))
            d = d3[row, cols]
            flon = lons[row, cols]
            flat = lats[row, cols]
            keep = d <= max_m
            pi, si, d, flon, flat, row = pi[keep], si[keep], d[keep], flon[keep], flat[keep], row[keep]
            ri = self.owner[si]
            seglen = geo.haversine_np(self.alon[si], self.alat[si], self.blon[si], self.blat[si])
            into = np.where(row == 1, 0.0, np.where(row == 2, seglen,
                            geo.haversine_np(self.alon[si], self.alat[si], flon, flat)))
            along = self.seg_start[si] + into
            # min distance per (point, road); ties keep the earliest segment
            order = np.lexsort((si, d, ri, pi))
            pi, ri, d, flon, flat, along = (a[order] for a in (pi, ri, d, flon, flat, along))
            first = np.ones(len(pi), bool)
            first[1:] = (pi[1:] != pi[:-1]) | (ri[1:] != ri[:-1])
            for acc, arr in zip(out, (pi[first] + s, ri[first], d[first], flon[first], flat[first], along[first])):
                acc.append(arr)
        if not out[0]:
            e = np.zeros(0)
            return np.zeros(0, np.int64), np.zeros(0, np.int64), e, e, e, e
        return tuple(np.concatenate(a) for a in out)

    def segment_pairs(self):
        """Unique (road a, road b) index pairs, a < b, whose segments share a grid cell."""
        keys, segs = self.keys, self.key_seg
        if len(keys) == 0:
            return []
        bounds = np.flatnonzero(np.diff(keys)) + 1
        starts = np.concatenate([[0], bounds])
        ends = np.concatenate([bounds, [len(keys)]])
        pairs = set()
        owner = self.owner
        for s, e in zip(starts, ends):
            if e - s < 2:
                continue
            owners = np.unique(owner[segs[s:e]])
            if len(owners) < 2:
                continue
            ol = owners.tolist()
            for i in range(len(ol)):
                for j in range(i + 1, len(ol)):
                    pairs.add((ol[i], ol[j]))
        return sorted(pairs)


# --- pairwise geometry predicates -------------------------------------------


def road_pair_hits(ga: Geometry, gb: Geometry, tol_m: float):
    """Points where two road lines cross or come within tol_m of each other.

    Each hit is reported on road a: the crossing point, or the point of a
    closest approach.
    """
    ref = ga.points[0]
    c = math.cos(math.radians(ref.lat))
    k = geo.METERS_PER_DEGREE

    def proj(p):
        return ((p.lon - ref.lon) * c * k, (p.lat - ref.lat) * k)

    def unproj(x, y):
        return GeoPoint(ref.lon + x / (c * k), ref.lat + y / k)

    A = [proj(p) for p in ga.points]
    B = [proj(p) for p in gb.points]
    hits = []
    for i in range(len(A) - 1):
        a1, a2 = A[i], A[i + 1]
        for j in range(len(B) - 1):
            b1, b2 = B[j], B[j + 1]
            if (max(a1[0], a2[0]) + tol_m < min(b1[0], b2[0]) or max(b1[0], b2[0]) + tol_m < min(a1[0], a2[0])
                    or max(a1[1], a2[1]) + tol_m < min(b1[1], b2[1]) or max(b1[1], b2[1]) + tol_m < min(a1[1], a2[1])):
                continue
            x = geo._segment_intersection(a1, a2, b1, b2)
            if x is not None:
                hits.append(unproj(*x))
                continue
            best = None
            for p, s1, s2, on_a in ((a1, b1, b2, True), (a2, b1, b2, True), (b1, a1, a2, False), (b2, a1, a2, False)):
                f = _foot(p, s1, s2)
                dd = math.hypot(p[0] - f[0], p[1] - f[1])
                if best is None or dd < best[0]:
                    best = (dd, p if on_a else f)
            if best[0] <= tol_m:
                hits.append(unproj(*best[1]))
    return hits


def _foot(p, a, b):
    dx, dy = b[0] - a[0], b[1] - a[1]
    l2 = dx * dx + dy * dy
    if l2 == 0:
        return a
    t = max(0.0, min(1.0, ((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / l2))
    return (a[0] + t * dx, a[1] + t * dy)


def road_aoi_relation(road: Geometry, aoi: Geometry, buffer_m: float):
    """EdgeKind.INTERSECTS, EdgeKind.BOUNDS or None for a road and an AOI polygon."""
    if aoi.kind != geo.POLYGON:
        return None
    if geo.segment_crossings(road, aoi) or any(geo.point_in_polygon(v, aoi) for v in road.points):
        return EdgeKind.INTERSECTS
    d, _, _ = geo.geometry_gap_m(road, aoi)
    if d <= buffer_m:
        return EdgeKind.BOUNDS
    return None


# --- edge measurement ---------------------------------------------------------


def _fallback_bearing(a: GeoPoint, b: GeoPoint) -> float:
    if a == b:
        return 0.0
    return geo.initial_bearing_deg(a, b)


def _directed(p: GeoPoint, q: GeoPoint, src: GraphNode, dst: GraphNode):
    d = geo.haversine_m(p, q)
    if d > 0:
        return d, geo.initial_bearing_deg(p, q)
    return 0.0, _fallback_bearing(src.anchor, dst.anchor)


def measure_edge(src: GraphNode, dst: GraphNode, kind: EdgeKind):
    """(distance_m, bearing_deg, crossing_point) for an edge in its stored direction.

    Distances run between the closest points of the two entities, bearings from
    the source contact point toward the destination contact point. Coincident
    contacts fall back to the anchor-to-anchor bearing.
    """
    if kind == EdgeKind.NEAREST:
        d, foot = geo.point_to_geometry_m(src.anchor, dst.geometry)
        if d > 0:
            return d, geo.initial_bearing_deg(src.anchor, foot), None
        return 0.0, _fallback_bearing(src.anchor, dst.anchor), None
    if kind in (EdgeKind.NEAR, EdgeKind.CROSSING):
        d, foot = geo.point_to_geometry_m(dst.anchor, src.geometry)
        cp = dst.anchor if kind == EdgeKind.CROSSING else None
        if d > 0:
            return d, geo.initial_bearing_deg(foot, dst.anchor), cp
        return 0.0, _fallback_bearing(src.anchor, dst.anchor), cp
    if kind == EdgeKind.ON_SAME_STREET:
        d, b = _directed(src.anchor, dst.anchor, src, dst)
        return d, b, None
    if kind == EdgeKind.BOUNDS:
        d, p1, p2 = geo.geometry_gap_m(src.geometry, dst.geometry)
        dd, b = _directed(p1, p2, src, dst)
        return dd, b, None
    if kind == EdgeKind.INTERSECTS:
        hits = geo.segment_crossings(src.geometry, dst.geometry)
        if hits:
            cp = hits[0]
        else:
            cp = next((v for v in src.geometry.points if geo.point_in_polygon(v, dst.geometry)), src.anchor)
        return 0.0, _fallback_bearing(src.anchor, dst.anchor), cp
    raise ValueError(f"unknown edge kind {kind}")


def make_edge(src: GraphNode, dst: GraphNode, kind: EdgeKind, via=None) -> GraphEdge:
    d, b, cp = measure_edge(src, dst, kind)
    return GraphEdge(src.id, dst.id, kind, d, b, cp, via)


# --- intersections ------------------------------------------------------------


def intersection_name(labels):
    labels = sorted(labels)
    if len(labels) == 2:
        return f"Intersection of {labels[0]} and {labels[1]}"
    return "Intersection of " + ", ".join(labels[:-1]) + f" and {labels[-1]}"


def cluster_hits(hits, tol_m: float):
    """Group (road_a, road_b, point) hits whose points lie within tol_m (single linkage).

    Returns clusters as lists of hit indices, in order of their first hit.
    """
    n = len(hits)
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    if n:
        max_lat = max(abs(h[2].lat) for h in hits)
        level = geo.level_for_spacing(tol_m, max_lat)
        cells: Dict[tuple, List[int]] = {}
        for i, (_, _, p) in enumerate(hits):
            cells.setdefault(geo.quantize(p.lon, p.lat, level), []).append(i)
        for (x, y), members in cells.items():
            near = []
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    near.extend(cells.get((x + dx, y + dy), ()))
            for i in members:
                for j in near:
                    if j > i and find(i) != find(j) and geo.haversine_m(hits[i][2], hits[j][2]) <= tol_m:
                        parent[max(find(i), find(j))] = min(find(i), find(j))
    groups: Dict[int, List[int]] = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)
    return sorted(groups.values(), key=lambda g: g[0])


def synthesize_intersections(roads: List[GraphNode], hits, tol_m: float):
    """Intersection nodes and (road id, intersection node) memberships from road-pair hits.

    ``hits`` is a list of (road_a index, road_b index, point) sorted by (a, b).
    """
    nodes, members = [], []
    used_ids = set()
    for group in cluster_hits(hits, tol_m):
        road_idx = sorted({r for h in group for r in hits[h][:2]})
        first = hits[group[0]]
        base = f"ix:{roads[first[0]].id}:{roads[first[1]].id}"
        node_id, k = base, 1
        while node_id in used_ids:
            k += 1
            node_id = f"{base}#{k}"
        used_ids.add(node_id)
        node = GraphNode(
            id=node_id,
            kind=NodeKind.INTERSECTION,
            geometry=Geometry(geo.POINT, (first[2],)),
            name=intersection_name([roads[r].label for r in road_idx]),
            category="intersection",
            attrs={"roads": ";".join(roads[r].id for r in road_idx)},
        )
        nodes.append(node)
        members.append([roads[r] for r in road_idx])
    return nodes, members


# --- build --------------------------------------------------------------------


def _split_nodes(nodes, report):
    kept = []
    for n in nodes:
        g = n.geometry
        if g is None:
            report.skipped.append((n.id, "no geometry"))
            continue
        if n.kind == NodeKind.ROAD and g.kind != geo.LINESTRING:
            report.skipped.append((n.id, "road without LineString geometry"))
            continue
        kept.append(n)
    return kept


def build_graph(nodes, cfg: Optional[GraphBuildConfig] = None, report: Optional[BuildReport] = None,
                metadata=None) -> SpatialGraph:
    """Derive all typed edges for a node set; output is independent of input order."""
    cfg = cfg or GraphBuildConfig()
    report = report if report is not None else BuildReport()
    seen = set()
    for n in nodes:
        if n.id in seen:
            raise DataError(f"build error: duplicate node id {n.id!r}")
        seen.add(n.id)
    nodes = sorted(_split_nodes(nodes, report), key=lambda n: n.id)
    g = SpatialGraph(cfg, metadata)
    for n in nodes:
        g.add_node(n)
    if not nodes:
        return g

    roads = [n for n in nodes if n.kind == NodeKind.ROAD]
    points = [n for n in nodes if n.kind in POINT_LIKE]
    aois = [n for n in nodes if n.kind == NodeKind.AOI and n.geometry.kind == geo.POLYGON]
    max_lat = max(abs(p.lat) for n in nodes for p in n.geometry.points) + 0.01
    spacing = max(cfg.nearest_cutoff_m, cfg.near_threshold_m, cfg.bounds_buffer_m, cfg.snap_tolerance_m)
    index = RoadIndex(roads, spacing * 1.001, max_lat)
    g._road_index = index

    edges: List[GraphEdge] = []

    # crossings
    hits = []
    for a, b in index.segment_pairs():
        for p in road_pair_hits(roads[a].geometry, roads[b].geometry, cfg.snap_tolerance_m):
            hits.append((a, b, p))
    ix_nodes, ix_members = synthesize_intersections(roads, hits, cfg.snap_tolerance_m)
    report.intersections = len(ix_nodes)
    for ix, members in zip(ix_nodes, ix_members):
        g.add_node(ix)
        for road in members:
            edges.append(make_edge(road, ix, EdgeKind.CROSSING))

    # nearest / near
    if points and roads:
        plon = np.fromiter((n.anchor.lon for n in points), float, len(points))
        plat = np.fromiter((n.anchor.lat for n in points), float, len(points))
        reach = max(cfg.nearest_cutoff_m, cfg.near_threshold_m)
        pi, ri, d, flon, flat, along = index.point_road_distances(plon, plat, reach)
        edges.extend(_nearest_and_near(points, roads, cfg, pi, ri, d, flon, flat, along))

    # bounds / intersects
    if aois and roads:
        edges.extend(_aoi_edges(roads, aois, index, cfg))

    edges.sort(key=lambda e: (EDGE_ORDER[e.kind], e.src, e.dst))
    for e in edges:
        g.add_edge(e)
    return g


def _nearest_and_near(points, roads, cfg, pi, ri, d, flon, flat, along):
    out = []
    if len(pi) == 0:
        return out
    plon = np.array([points[i].anchor.lon for i in pi])
    plat = np.array([points[i].anchor.lat for i in pi])
    rlon = np.array([roads[r].anchor.lon for r in ri])
    rlat = np.array([roads[r].anchor.lat for r in ri])
    pos = d > 0
    to_foot = np.where(pos, geo.bearing_np(plon, plat, flon, flat), geo.bearing_np(plon, plat, rlon, rlat))
    from_foot = np.where(pos, geo.bearing_np(flon, flat, plon, plat), geo.bearing_np(rlon, rlat, plon, plat))
    same_anchor = (plon == rlon) & (plat == rlat)
    to_foot = np.where(~pos & same_anchor, 0.0, to_foot)
    from_foot = np.where(~pos & same_anchor, 0.0, from_foot)

    # pi is sorted, then ri; nearest = min distance per point, lowest road index on ties
    order = np.lexsort((ri, d, pi))
    first = np.ones(len(order), bool)
    first[1:] = pi[order][1:] != pi[order][:-1]
    nearest_rows = order[first]
    nearest_rows = nearest_rows[d[nearest_rows] <= cfg.nearest_cutoff_m]

    by_road: Dict[int, list] = {}
    for k in nearest_rows.tolist():
        p, r = points[pi[k]], roads[ri[k]]
        out.append(GraphEdge(p.id, r.id, EdgeKind.NEAREST, float(d[k]), float(to_foot[k])))
        if p.kind == NodeKind.POI:
            by_road.setdefault(ri[k], []).append((float(along[k]), p.id, p))

    near_rows = np.flatnonzero(d <= cfg.near_threshold_m)
    for k in near_rows.tolist():
        p = points[pi[k]]
        if p.kind != NodeKind.POI:
            continue
        r = roads[ri[k]]
        out.append(GraphEdge(r.id, p.id, EdgeKind.NEAR, float(d[k]), float(from_foot[k])))

    pairs = []
    for r, members in by_road.items():
        members.sort(key=lambda t: (t[0], t[1]))
        for (_, _, a), (_, _, b) in zip(members, members[1:]):
            pairs.append((a, b, roads[r].id))
    if pairs:
        alon = np.array([a.anchor.lon for a, _, _ in pairs])
        alat = np.array([a.anchor.lat for a, _, _ in pairs])
        blon = np.array([b.anchor.lon for _, b, _ in pairs])
        blat = np.array([b.anchor.lat for _, b, _ in pairs])
        dist = geo.haversine_np(alon, alat, blon, blat)
        bear = np.where(dist > 0, geo.bearing_np(alon, alat, blon, blat), 0.0)
        for (a, b, via), dd, bb in zip(pairs, dist.tolist(), bear.tolist()):
            out.append(GraphEdge(a.id, b.id, EdgeKind.ON_SAME_STREET, dd, bb, None, via))
    return out


def _aoi_edges(roads, aois, index: RoadIndex, cfg):
    out = []
    rb = np.array([r.geometry.bbox() for r in roads])
    for aoi in aois:
        x0, y0, x1, y1 = aoi.geometry.bbox()
        pad_lat = cfg.bounds_buffer_m / geo.METERS_PER_DEGREE * 1.01
        pad_lon = pad_lat / max(math.cos(math.radians(max(abs(y0), abs(y1)))), 1e-6)
        cand = np.flatnonzero(
            (rb[:, 0] <= x1 + pad_lon) & (rb[:, 2] >= x0 - pad_lon) & (rb[:, 1] <= y1 + pad_lat) & (rb[:, 3] >= y0 - pad_lat)
        )
        for r in cand.tolist():
            kind = road_aoi_relation(roads[r].geometry, aoi.geometry, cfg.bounds_buffer_m)
            if kind is not None:
                out.append(make_edge(roads[r], aoi, kind))
    return out


# --- anchoring ----------------------------------------------------------------


def _road_index(g: SpatialGraph) -> RoadIndex:
    idx = getattr(g, "_road_index", None)
    roads = [n for _, n in sorted(g.nodes.items()) if n.kind == NodeKind.ROAD]
    if idx is None or len(idx.roads) != len(roads):
        max_lat = max((abs(n.anchor.lat) for n in roads), default=0.0) + 0.5
        cfg = g.config
        spacing = max(cfg.nearest_cutoff_m, cfg.near_threshold_m, cfg.bounds_buffer_m, cfg.snap_tolerance_m)
        idx = RoadIndex(roads, spacing * 1.001, min(max_lat, 89.0))
        g._road_index = idx
    return idx


def nearest_road(g: SpatialGraph, p: GeoPoint):
    """(road node, distance) of the closest road within nearest_cutoff_m, or (None, inf)."""
    idx = _road_index(g)
    pi, ri, d, *_ = idx.point_road_distances(np.array([p.lon]), np.array([p.lat]), g.config.nearest_cutoff_m)
    if len(d) == 0:
        return None, math.inf
    k = int(np.lexsort((ri, d))[0])
    return idx.roads[ri[k]], float(d[k])


def anchor_image(g: SpatialGraph, image_id: str, p: GeoPoint) -> str:
    """Insert a viewpoint for an image and link it to its nearest road; idempotent."""
    image_id = str(image_id)
    existing = g.nodes.get(image_id)
    if existing is not None:
        if existing.kind == NodeKind.VIEWPOINT and existing.anchor == p:
            return image_id
        raise DataError(f"node id {image_id!r} already exists with different content")
    road, _ = nearest_road(g, p)
    if road is None:
        raise UnanchorableImage(f"image {image_id!r}: no road within {g.config.nearest_cutoff_m} m")
    node = GraphNode(id=image_id, kind=NodeKind.VIEWPOINT, geometry=Geometry(geo.POINT, (p,)),
                     category="viewpoint")
    g.add_node(node)
    g.add_edge(make_edge(node, road, EdgeKind.NEAREST))
    return image_id


# --- validation ---------------------------------------------------------------


@dataclass
class Violation:
    code: str
    subject: str
    message: str


@dataclass
class ValidationReport:
    violations: List[Violation] = field(default_factory=list)

    @property
    def ok(self):
        return not self.violations

    def __len__(self):
        return len(self.violations)

    def add(self, code, subject, message):
        self.violations.append(Violation(code, subject, message))


def _edge_label(e: GraphEdge) -> str:
    return f"{e.src}-[{e.kind.value}]->{e.dst}"


def validate_graph(g: SpatialGraph, dist_tol_m: float = 0.1, bearing_tol_deg: float = 0.5) -> ValidationReport:
    """Check structural and geometric invariants; findings are returned, not raised.

    Bearings are only compared for contacts at least 0.5 m apart, where a
    direction is numerically meaningful.
    """
    rep = ValidationReport()
    for nid, n in g.nodes.items():
        if n.id != nid:
            rep.add("node-id", nid, f"stored under {nid!r} but has id {n.id!r}")
        a = n.geometry.anchor()
        if geo.haversine_m(a, n.anchor) > 0.01:
            rep.add("anchor", nid, "anchor inconsistent with geometry")
        c = geo.cell_id(n.anchor, g.config.cell_level)
        if nid not in g.cell_index.get(c, ()):
            rep.add("cell-index", nid, f"missing from cell {c}")
    indexed = sum(len(v) for v in g.cell_index.values())
    if indexed != len(g.nodes):
        rep.add("cell-index", "*", f"{indexed} index entries for {len(g.nodes)} nodes")

    for i, e in enumerate(g.edges):
        label = _edge_label(e)
        missing = [x for x in (e.src, e.dst) if x not in g.nodes]
        if missing:
            rep.add("dangling-edge", label, f"endpoint(s) {missing} not in graph")
            continue
        if e.src == e.dst:
            rep.add("self-loop", label, "src == dst")
            continue
        for end in (e.src, e.dst):
            if i not in g.adjacency.get(end, ()):
                rep.add("adjacency", label, f"edge missing from adjacency of {end!r}")
        try:
            d, b, _ = measure_edge(g.nodes[e.src], g.nodes[e.dst], e.kind)
        except (ValueError, UnknownNode) as exc:
            rep.add("measure", label, str(exc))
            continue
        if abs(d - e.distance_m) > dist_tol_m:
            rep.add("distance", label, f"stored {e.distance_m:.3f} m, recomputed {d:.3f} m")
        elif d >= 0.5:
            diff = abs(b - e.bearing_deg) % 360.0
            if min(diff, 360.0 - diff) > bearing_tol_deg:
                rep.add("bearing", label, f"stored {e.bearing_deg:.2f}, recomputed {b:.2f}")
    for nid, idxs in g.adjacency.items():
        for i in idxs:
            if i >= len(g.edges) or nid not in (g.edges[i].src, g.edges[i].dst):
                rep.add("adjacency", nid, f"adjacency references foreign edge {i}")
    return rep
