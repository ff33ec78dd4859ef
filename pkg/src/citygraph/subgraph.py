"""Localized subgraphs around a viewpoint, their text description and caption prompt."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from typing import List, Optional

from . import geo
from .errors import ConfigError, FormatVersionError, ParseError
from .graph import GraphEdge, GraphNode, NodeKind, SpatialGraph

SUBGRAPH_FORMAT = "citygraph-subgraph"
SUBGRAPH_FORMAT_VERSION = 1
PROMPT_SCHEMA_VERSION = "1"

ATTRIBUTE_ORDER = (
    "building use",
    "historic district",
    "architect",
    "building type",
    "street",
    "housenumber",
    "postcode",
    "planning area",
    "district",
    "city",
    "country",
)


@dataclass
class ExtractConfig:
    radius_m: float = 200.0
    max_nearby: int = 10
    max_onehop: int = 12

    def __post_init__(self):
        if not (self.radius_m > 0 and self.max_nearby > 0 and self.max_onehop > 0):
            raise ConfigError("radius_m, max_nearby and max_onehop must all be > 0")

    @classmethod
    def from_dict(cls, d):
        return cls(**(d or {}))


@dataclass(frozen=True)
class NearbyEntry:
    node: GraphNode
    distance_m: float
    bearing_deg: Optional[float]  # None when the anchor coincides with the center


@dataclass(frozen=True)
class OneHopEntry:
    node: GraphNode
    via: str
    distance_m: float
    bearing_deg: Optional[float]


@dataclass
class Subgraph:
    center_ids: List[str]
    centers: List[GraphNode]
    nearby: List[NearbyEntry] = field(default_factory=list)
    onehop: List[OneHopEntry] = field(default_factory=list)
    edges: List[GraphEdge] = field(default_factory=list)

    def all_nodes(self) -> List[GraphNode]:
        return [*self.centers, *(e.node for e in self.nearby), *(e.node for e in self.onehop)]

    @property
    def n_nodes(self):
        return len(self.centers) + len(self.nearby) + len(self.onehop)


def _relative(center: GraphNode, node: GraphNode):
    d = geo.haversine_m(center.anchor, node.anchor)
    if d == 0.0:
        return 0.0, None
    return d, geo.initial_bearing_deg(center.anchor, node.anchor)


def extract_subgraph(g: SpatialGraph, center: str, cfg: Optional[ExtractConfig] = None) -> Subgraph:
    """Center node, its nearby set (directly connected or within radius) and their one-hop ring.

    Ordering everywhere is (anchor distance from the center, node id).
    """
    cfg = cfg or ExtractConfig()
    c = g.node(center)
    candidates = set(g.neighbors(center))
    candidates.update(nid for nid, _ in g.nodes_within(c.anchor, cfg.radius_m))
    candidates.discard(center)
    ranked = sorted((_relative(c, g.nodes[nid]) + (nid,) for nid in candidates), key=lambda t: (t[0], t[2]))
    nearby = [NearbyEntry(g.nodes[nid], d, b) for d, b, nid in ranked[: cfg.max_nearby]]

    included = {center, *(e.node.id for e in nearby)}
    via = {}
    for entry in nearby:
        for nb in g.neighbors(entry.node.id):
            if nb not in included and nb not in via:
                via[nb] = entry.node.id
    ring = sorted((_relative(c, g.nodes[nid]) + (nid,) for nid in via), key=lambda t: (t[0], t[2]))
    onehop = [OneHopEntry(g.nodes[nid], via[nid], d, b) for d, b, nid in ring[: cfg.max_onehop]]
    included.update(e.node.id for e in onehop)

    seen = set()
    edge_idx = []
    for nid in included:
        for i in g.adjacency.get(nid, ()):
            e = g.edges[i]
            if i not in seen and e.src in included and e.dst in included:
                seen.add(i)
                edge_idx.append(i)
    edges = sorted((g.edges[i] for i in edge_idx), key=lambda e: (e.src, e.dst, e.kind.value))
    return Subgraph([center], [c], nearby, onehop, edges)


# --- description --------------------------------------------------------------


@dataclass(frozen=True)
class SubgraphDescription:
    overview: str
    center_section: str
    nearby_section: str
    onehop_section: str
    connections_section: str

    def text(self) -> str:
        return "\n\n".join(
            (self.overview, self.center_section, self.nearby_section, self.onehop_section, self.connections_section)
        )


def _attr_items(attrs):
    norm = {k.replace("_", " ").strip().lower(): (k, v) for k, v in attrs.items()}
    ordered = [norm[k] for k in ATTRIBUTE_ORDER if k in norm]
    extras = sorted(v for k, v in norm.items() if k not in ATTRIBUTE_ORDER)
    return [(k.replace("_", " "), v) for k, v in ordered + extras]


def _direction(distance_m, bearing_deg):
    if bearing_deg is None:
        return f"{distance_m:.1f}m, at the same position"
    return f"{distance_m:.1f}m {geo.cardinal8(bearing_deg)} ({round(bearing_deg) % 360}°)"


def _node_line(n: GraphNode):
    if n.name:
        head = f"{n.name} (id: {n.id}"
    else:
        head = f"{'Image location' if n.kind == NodeKind.VIEWPOINT else 'Unnamed'} (id: {n.id}"
    parts = [head, f"type: {n.kind.value}"]
    if n.category:
        parts.append(f"category: {n.category}")
    parts.append(f"geometry: {n.geometry.kind}")
    attrs = _attr_items(n.attrs)
    if attrs:
        parts.append("attributes: " + "; ".join(f"{k}: {v}" for k, v in attrs))
    return ", ".join(parts) + f") at ({n.anchor.lon:.6f}, {n.anchor.lat:.6f})"


def describe_subgraph(s: Subgraph) -> SubgraphDescription:
    """Deterministic five-section text rendering of a subgraph.

    N counts every included node (centers, nearby and one-hop); E counts the
    induced edges stored on the subgraph.
    """
    overview = (
        f"This network contains {s.n_nodes} locations, with {len(s.centers)} center nodes "
        f"and {len(s.edges)} connections."
    )
    labels = {n.id: n.label for n in s.all_nodes()}
    center_lines = ["Center Nodes:"]
    for c in s.centers:
        line = f"- {_node_line(c)}"
        road = next(
            (e for e in s.edges if e.src == c.id and e.kind.value == "nearest"), None
        )
        if road is not None:
            line += f", facing {labels[road.dst]} at {_direction(road.distance_m, road.bearing_deg if road.distance_m > 0 else None)}"
        center_lines.append(line)
    nearby_lines = ["Nearby Locations:"]
    nearby_lines += [f"- {_node_line(e.node)}, {_direction(e.distance_m, e.bearing_deg)} from center" for e in s.nearby]
    onehop_lines = ["Locations Connected to Nearby Areas:"]
    onehop_lines += [
        f"- {_node_line(e.node)}, via {labels[e.via]}, {_direction(e.distance_m, e.bearing_deg)} from center"
        for e in s.onehop
    ]
    conn_lines = ["Connections in the Network:"]
    for e in s.edges:
        bearing = e.bearing_deg if e.distance_m > 0 else None
        line = f"- {labels[e.src]} -> {labels[e.dst]}: {e.kind.value}, {_direction(e.distance_m, bearing)}"
        if e.via is not None and e.via in labels:
            line += f", along {labels[e.via]}"
        elif e.via is not None:
            line += f", along {e.via}"
        if e.crossing_point is not None:
            line += f", crossing at ({e.crossing_point.lon:.6f}, {e.crossing_point.lat:.6f})"
        conn_lines.append(line)
    return SubgraphDescription(
        overview, "\n".join(center_lines), "\n".join(nearby_lines), "\n".join(onehop_lines), "\n".join(conn_lines)
    )


# --- caption prompt -----------------------------------------------------------


@dataclass(frozen=True)
class CaptionPrompt:
    full_text: str
    schema_version: str = PROMPT_SCHEMA_VERSION


def caption_template() -> str:
    return resources.files("citygraph").joinpath("templates/caption_prompt.txt").read_text(encoding="utf-8")


def build_caption_prompt(d) -> CaptionPrompt:
    """Fill the caption prompt template; ``d`` is a SubgraphDescription or plain text."""
    desc = d.text() if isinstance(d, SubgraphDescription) else str(d)
    return CaptionPrompt(caption_template().replace("{subgraph_desc}", desc))


# --- serialization ------------------------------------------------------------


def _body(s: Subgraph):
    return {
        "center_ids": list(s.center_ids),
        "centers": [c.to_json() for c in s.centers],
        "nearby": [{"node": e.node.to_json(), "distance_m": e.distance_m, "bearing_deg": e.bearing_deg} for e in s.nearby],
        "onehop": [
            {"node": e.node.to_json(), "via": e.via, "distance_m": e.distance_m, "bearing_deg": e.bearing_deg}
            for e in s.onehop
        ],
        "edges": [e.to_json() for e in s.edges],
    }


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def serialize_subgraph(s: Subgraph) -> bytes:
    """Two-line document: a JSON header, then the JSON body whose raw bytes the header hashes."""
    body = _canonical(_body(s))
    header = {
        "format": SUBGRAPH_FORMAT,
        "version": SUBGRAPH_FORMAT_VERSION,
        "length": len(body),
        "sha256": hashlib.sha256(body).hexdigest(),
    }
    return _canonical(header) + b"\n" + body + b"\n"


def parse_subgraph(data: bytes) -> Subgraph:
    data = bytes(data)
    nl = data.find(b"\n")
    if nl < 0:
        raise ParseError("subgraph document has no header line", len(data))
    try:
        header = json.loads(data[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise ParseError("malformed subgraph header", 0) from None
    if not isinstance(header, dict) or header.get("format") != SUBGRAPH_FORMAT:
        raise ParseError("not a subgraph document", 0)
    if header.get("version") != SUBGRAPH_FORMAT_VERSION:
        raise FormatVersionError(f"unsupported subgraph version {header.get('version')!r}")
    raw = data[nl + 1 :]
    if raw.endswith(b"\n"):
        raw = raw[:-1]
    if len(raw) != header.get("length"):
        raise ParseError(f"subgraph body is {len(raw)} bytes, header says {header.get('length')}", nl + 1)
    if hashlib.sha256(raw).hexdigest() != header.get("sha256"):
        raise ParseError("subgraph checksum mismatch", nl + 1)
    try:
        body = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError("malformed subgraph body", nl + 1) from None
    try:
        return Subgraph(
            center_ids=list(body["center_ids"]),
            centers=[GraphNode.from_json(c) for c in body["centers"]],
            nearby=[NearbyEntry(GraphNode.from_json(e["node"]), e["distance_m"], e["bearing_deg"]) for e in body["nearby"]],
            onehop=[
                OneHopEntry(GraphNode.from_json(e["node"]), e["via"], e["distance_m"], e["bearing_deg"])
                for e in body["onehop"]
            ],
            edges=[GraphEdge.from_json(e) for e in body["edges"]],
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"subgraph document has bad structure: {exc}") from None


def viewpoint_centers(g: SpatialGraph):
    return [n.id for n in g.nodes_of_kind(NodeKind.VIEWPOINT)]

