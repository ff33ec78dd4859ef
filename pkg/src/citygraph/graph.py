"""Urban spatial graph data model and its on-disk container.

A graph is a set of typed nodes (viewpoints, roads, intersections, POIs, AOIs,
transit facilities) and undirected typed edges. Each edge stores the distance
and bearing measured in its stored direction; traversing it backwards flips
the bearing by 180 degrees.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, Iterator, List, Optional

import numpy as np

from . import geo
from .errors import ConfigError, DataError, FormatVersionError, ParseError, UnknownNode
from .geo import CellId, GeoPoint, Geometry

GRAPH_FORMAT = "citygraph-graph"
GRAPH_FORMAT_VERSION = 1


class NodeKind(str, Enum):
    VIEWPOINT = "Viewpoint"
    ROAD = "Road"
    INTERSECTION = "Intersection"
    POI = "POI"
    AOI = "AOI"
    TRANSIT = "TransitFacility"


class EdgeKind(str, Enum):
    ON_SAME_STREET = "on_same_street"
    CROSSING = "crossing"
    NEAREST = "nearest"
    NEAR = "near"
    BOUNDS = "bounds"
    INTERSECTS = "intersects"


POINT_LIKE = (NodeKind.VIEWPOINT, NodeKind.POI, NodeKind.TRANSIT)


@dataclass(frozen=True)
class GraphNode:
    id: str
    kind: NodeKind
    geometry: Geometry
    name: Optional[str] = None
    category: Optional[str] = None
    attrs: Dict[str, str] = field(default_factory=dict)
    anchor: Optional[GeoPoint] = None

    def __post_init__(self):
        if not isinstance(self.kind, NodeKind):
            object.__setattr__(self, "kind", NodeKind(self.kind))
        if self.anchor is None and self.geometry is not None:
            object.__setattr__(self, "anchor", self.geometry.anchor())

    @property
    def label(self) -> str:
        """Name used in generated text: the name, falling back to the id."""
        return self.name if self.name else self.id

    def to_json(self):
        return {
            "id": self.id,
            "kind": self.kind.value,
            "name": self.name,
            "category": self.category,
            "attrs": dict(sorted(self.attrs.items())),
            "geometry": {"type": self.geometry.kind, "coordinates": geometry_coordinates(self.geometry)},
            "anchor": [self.anchor.lon, self.anchor.lat],
        }

    @classmethod
    def from_json(cls, obj):
        g = geometry_from_geojson(obj["geometry"])
        anchor = obj.get("anchor")
        return cls(
            id=obj["id"],
            kind=NodeKind(obj["kind"]),
            geometry=g,
            name=obj.get("name"),
            category=obj.get("category"),
            attrs=dict(obj.get("attrs") or {}),
            anchor=GeoPoint(*anchor) if anchor is not None else None,
        )


@dataclass(frozen=True, slots=True)
class GraphEdge:
    src: str
    dst: str
    kind: EdgeKind
    distance_m: float
    bearing_deg: float
    crossing_point: Optional[GeoPoint] = None
    via: Optional[str] = None  # shared road of an on_same_street pair

    def key(self):
        return (self.src, self.dst, self.kind.value)

    def other(self, node_id: str) -> str:
        return self.dst if node_id == self.src else self.src

    def bearing_from(self, node_id: str) -> float:
        """Bearing when traversed starting at node_id."""
        if node_id == self.src:
            return self.bearing_deg
        return geo.reverse_bearing(self.bearing_deg)

    def to_json(self):
        cp = self.crossing_point
        return {
            "src": self.src,
            "dst": self.dst,
            "kind": self.kind.value,
            "distance_m": self.distance_m,
            "bearing_deg": self.bearing_deg,
            "crossing_point": [cp.lon, cp.lat] if cp is not None else None,
            "via": self.via,
        }

    @classmethod
    def from_json(cls, obj):
        cp = obj.get("crossing_point")
        return cls(
            src=obj["src"],
            dst=obj["dst"],
            kind=EdgeKind(obj["kind"]),
            distance_m=float(obj["distance_m"]),
            bearing_deg=float(obj["bearing_deg"]),
            crossing_point=GeoPoint(*cp) if cp is not None else None,
            via=obj.get("via"),
        )


@dataclass
class GraphBuildConfig:
    nearest_cutoff_m: float = 100.0
    near_threshold_m: float = 50.0
    snap_tolerance_m: float = 1.0
    bounds_buffer_m: float = 15.0
    cell_level: int = geo.DEFAULT_CELL_LEVEL

    def __post_init__(self):
        for name in ("nearest_cutoff_m", "near_threshold_m", "snap_tolerance_m", "bounds_buffer_m"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                raise ConfigError(f"{name} must be > 0, got {v!r}")
        if not isinstance(self.cell_level, int) or not 0 <= self.cell_level <= geo.MAX_CELL_LEVEL:
            raise ConfigError(f"cell_level must be in [0, {geo.MAX_CELL_LEVEL}]")

    @classmethod
    def from_dict(cls, d):
        return cls(**(d or {}))


class SpatialGraph:
    """Node store, undirected adjacency and a Morton cell index over node anchors."""

    def __init__(self, config: Optional[GraphBuildConfig] = None, metadata=None):
        self.config = config or GraphBuildConfig()
        self.metadata = dict(metadata or {})
        self.nodes: Dict[str, GraphNode] = {}
        self.edges: List[GraphEdge] = []
        self.adjacency: Dict[str, List[int]] = {}
        self.cell_index: Dict[CellId, List[str]] = {}
        self._edge_keys = set()
        self._arrays = None

    # -- mutation --------------------------------------------------------

    def add_node(self, node: GraphNode):
        if node.id in self.nodes:
            raise DataError(f"duplicate node id {node.id!r}")
        self.nodes[node.id] = node
        self.adjacency[node.id] = []
        c = geo.cell_id(node.anchor, self.config.cell_level)
        self.cell_index.setdefault(c, []).append(node.id)
        self._arrays = None

    def add_edge(self, edge: GraphEdge):
        if edge.src == edge.dst:
            raise DataError(f"self-loop edge on {edge.src!r}")
        if edge.key() in self._edge_keys:
            return False
        self._edge_keys.add(edge.key())
        idx = len(self.edges)
        self.edges.append(edge)
        self.adjacency.setdefault(edge.src, []).append(idx)
        self.adjacency.setdefault(edge.dst, []).append(idx)
        return True

    # -- queries ---------------------------------------------------------

    def node(self, node_id: str) -> GraphNode:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise UnknownNode(f"unknown node {node_id!r}") from None

    def __contains__(self, node_id):
        return node_id in self.nodes

    def __len__(self):
        return len(self.nodes)

    def incident(self, node_id: str) -> Iterator[GraphEdge]:
        for i in self.adjacency.get(node_id, ()):
            yield self.edges[i]

    def neighbors(self, node_id: str):
        """Sorted ids of nodes sharing at least one edge with node_id."""
        return sorted({e.other(node_id) for e in self.incident(node_id)})

    def edges_between(self, a: str, b: str) -> List[GraphEdge]:
        return [e for e in self.incident(a) if e.other(a) == b]

    def nodes_of_kind(self, kind: NodeKind) -> List[GraphNode]:
        return [n for _, n in sorted(self.nodes.items()) if n.kind == kind]

    def counters(self):
        nk = Counter(n.kind.value for n in self.nodes.values())
        ek = Counter(e.kind.value for e in self.edges)
        return {
            "nodes": len(self.nodes),
            "edges": len(self.edges),
            "node_kinds": {k.value: nk.get(k.value, 0) for k in NodeKind},
            "edge_kinds": {k.value: ek.get(k.value, 0) for k in EdgeKind},
        }

    def _anchor_arrays(self):
        if self._arrays is None:
            ids = list(self.nodes)
            lon = np.fromiter((self.nodes[i].anchor.lon for i in ids), float, len(ids))
            lat = np.fromiter((self.nodes[i].anchor.lat for i in ids), float, len(ids))
            self._arrays = (ids, lon, lat, {})
        return self._arrays

    def _radius_index(self, level):
        """Anchor positions sorted by their Morton key at ``level`` (cached per level)."""
        ids, lon, lat, by_level = self._anchor_arrays()
        if level not in by_level:
            x, y = geo.quantize_np(lon, lat, level)
            keys = (x << level) | y
            order = np.argsort(keys, kind="stable")
            by_level[level] = (keys[order], order)
        return by_level[level]

    def nodes_within(self, p: GeoPoint, radius_m: float):
        """(node id, anchor distance) pairs with anchor within radius_m of p, unordered."""
        ids, lon, lat, _ = self._anchor_arrays()
        if not ids:
            return []
        level = geo.level_for_spacing(radius_m, min(abs(p.lat) + 0.5, 89.0))
        keys, order = self._radius_index(level)
        cx, cy = geo.quantize(p.lon, p.lat, level)
        n = 1 << level
        chunks = []
        for dx in (-1, 0, 1):
            x = cx + dx
            if not 0 <= x < n:
                continue
            # the three cells of a column are contiguous in (x << level) | y order
            lo = np.searchsorted(keys, (x << level) | max(cy - 1, 0), "left")
            hi = np.searchsorted(keys, (x << level) | min(cy + 1, n - 1), "right")
            if hi > lo:
                chunks.append(order[lo:hi])
        if not chunks:
            return []
        idx = np.concatenate(chunks)
        d = geo.haversine_np(p.lon, p.lat, lon[idx], lat[idx])
        keep = d <= radius_m
        return [(ids[i], float(dd)) for i, dd in zip(idx[keep].tolist(), d[keep].tolist())]

    # -- persistence -----------------------------------------------------

    def save(self, directory):
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "nodes.jsonl", "w", encoding="utf-8") as fh:
            for nid in sorted(self.nodes):
                fh.write(_dumps(self.nodes[nid].to_json()) + "\n")
        with open(out / "edges.jsonl", "w", encoding="utf-8") as fh:
            for e in self.edges:
                fh.write(_dumps(e.to_json()) + "\n")
        meta = {
            "format": GRAPH_FORMAT,
            "version": GRAPH_FORMAT_VERSION,
            "config": asdict(self.config),
            "counters": self.counters(),
            "metadata": self.metadata,
        }
        (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return out

    @classmethod
    def load(cls, directory):
        src = Path(directory)
        try:
            meta = json.loads((src / "meta.json").read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ParseError(f"bad meta.json: {exc.msg}", exc.pos) from None
        if meta.get("format") != GRAPH_FORMAT or meta.get("version") != GRAPH_FORMAT_VERSION:
            raise FormatVersionError(
                f"unsupported graph container {meta.get('format')!r} v{meta.get('version')!r}"
            )
        g = cls(GraphBuildConfig.from_dict(meta.get("config")), meta.get("metadata"))
        for obj in _read_jsonl(src / "nodes.jsonl"):
            g.add_node(GraphNode.from_json(obj))
        for obj in _read_jsonl(src / "edges.jsonl"):
            e = GraphEdge.from_json(obj)
            for end in (e.src, e.dst):
                if end not in g.nodes:
                    raise DataError(f"edge references unknown node {end!r}")
            g.add_edge(e)
        return g


def _dumps(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def _read_jsonl(path):
    with open(path, "r", encoding="utf-8") as fh:
        offset = 0
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                try:
                    yield json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ParseError(f"{path.name}:{lineno}: {exc.msg}", offset + exc.pos) from None
            offset += len(line.encode("utf-8"))


def geometry_coordinates(g: Geometry):
    coords = [[p.lon, p.lat] for p in g.points]
    if g.kind == geo.POINT:
        return coords[0]
    if g.kind == geo.POLYGON:
        return [coords]
    return coords


def geometry_from_geojson(obj) -> Geometry:
    """Geometry from a GeoJSON geometry object (Polygon holes are dropped)."""
    if not isinstance(obj, dict):
        raise geo.InvalidGeometry("geometry must be an object")
    kind = obj.get("type")
    coords = obj.get("coordinates")
    try:
        if kind == geo.POINT:
            return Geometry.point(float(coords[0]), float(coords[1]))
        if kind == geo.LINESTRING:
            return Geometry.linestring([(float(x), float(y)) for x, y, *_ in coords])
        if kind == geo.POLYGON:
            return Geometry.polygon([(float(x), float(y)) for x, y, *_ in coords[0]])
    except (TypeError, IndexError, ValueError) as exc:
        if isinstance(exc, geo.InvalidGeometry) or isinstance(exc, geo.InvalidCoordinate):
            raise
        raise geo.InvalidGeometry(f"malformed {kind} coordinates") from None
    raise geo.InvalidGeometry(f"unsupported geometry type {kind!r}")
