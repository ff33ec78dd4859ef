"""Spatial reasoning paths: discovery, selection, annotation, text form and training records.

A path is a chain of graph edges leaving an image viewpoint. Each edge becomes
one relational triple. Alongside the triples we track *waypoints*: the point
where the route touches each entity. Every triple carries a trailing
transition from the departure point on its source to the arrival point on its
target. When the route has to travel along a road or area before leaving it,
a standalone move step describes that stretch::

    (img, nearest, Kallang Road) (2.0m, 342°(N)) -> (3.2m, 72°(E)) -> (Kallang Road, Intersection of ...) ...

Crossing triples whose relation is ``intersection`` are written in the short
two-element form used by the published samples; ``complex_crossing`` (more than
two roads) keeps three elements.
"""

from __future__ import annotations

import re
from collections import deque
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

from . import geo
from .errors import ConfigError, DataError, ParseError
from .geo import GeoPoint, Transition
from .graph import EdgeKind, GraphEdge, GraphNode, NodeKind, SpatialGraph

KNOWN_RELATIONS = ("nearest", "near", "bounds", "intersects", "intersection", "complex_crossing")
EDGE_PRIORITY = (
    EdgeKind.CROSSING,
    EdgeKind.ON_SAME_STREET,
    EdgeKind.NEAREST,
    EdgeKind.NEAR,
    EdgeKind.BOUNDS,
    EdgeKind.INTERSECTS,
)
GROUPS = ("polygonal", "linear", "point")

STAGE1_INSTRUCTION = "<image> Describe if this viewpoint is reachable or the destination is reachable from the viewpoint."
NOTATION_NOTE = (
    "Note on path notation: Triple indicates the decision point information in the path, the arrow '->' "
    "indicates the next step in the path, and parentheses (e.g., (50m, S)) immediately after a triple describe "
    "the distance and direction from the source to the target node."
)


class InvalidPath(DataError):
    pass


@dataclass
class SrpConfig:
    max_hops: int = 8
    min_hops: int = 2
    max_path_m: float = 2000.0
    per_hop_quota: int = 1
    excluded_kinds: Tuple[NodeKind, ...] = (NodeKind.INTERSECTION,)

    def __post_init__(self):
        self.excluded_kinds = tuple(NodeKind(k) for k in self.excluded_kinds)
        if not (1 <= self.min_hops <= self.max_hops):
            raise ConfigError(f"need 1 <= min_hops <= max_hops, got {self.min_hops}, {self.max_hops}")
        if self.max_path_m <= 0 or self.per_hop_quota < 1:
            raise ConfigError("max_path_m must be > 0 and per_hop_quota >= 1")

    @classmethod
    def from_dict(cls, d):
        return cls(**(d or {}))


# --- path model ---------------------------------------------------------------


@dataclass(frozen=True)
class Triple:
    source: str
    relation: str
    target: str


@dataclass(frozen=True)
class TripleStep:
    triple: Triple
    trailing: Optional[Transition] = None


@dataclass(frozen=True)
class MoveStep:
    transition: Transition


PathStep = Union[TripleStep, MoveStep]


@dataclass
class AnnotatedPath:
    image_id: str
    origin: Optional[GeoPoint]
    steps: List[PathStep]
    destination: str
    # (from, to) coordinates behind each transition, in step order; not part of the text form
    legs: List[Tuple[GeoPoint, GeoPoint]] = field(default_factory=list, compare=False, repr=False)
    node_ids: List[str] = field(default_factory=list, compare=False, repr=False)

    @property
    def hops(self) -> int:
        return sum(isinstance(s, TripleStep) for s in self.steps)

    def triples(self) -> List[Triple]:
        return [s.triple for s in self.steps if isinstance(s, TripleStep)]

    def transitions(self) -> List[Transition]:
        out = []
        for s in self.steps:
            if isinstance(s, MoveStep):
                out.append(s.transition)
            elif s.trailing is not None:
                out.append(s.trailing)
        return out

    def quantized(self) -> "AnnotatedPath":
        """Copy at the precision of the text form (0.1 m, 1 degree, 4-decimal origin)."""
        steps = []
        for s in self.steps:
            if isinstance(s, MoveStep):
                steps.append(MoveStep(_quantize(s.transition)))
            else:
                steps.append(TripleStep(s.triple, _quantize(s.trailing) if s.trailing else None))
        origin = None if self.origin is None else GeoPoint(round(self.origin.lon, 4), round(self.origin.lat, 4))
        return AnnotatedPath(self.image_id, origin, steps, self.destination)


def _quantize(t: Transition) -> Transition:
    d = round(t.distance_m, 1) + 0.0
    if t.bearing_deg is None:
        return Transition(d, None, None)
    b = float(round(t.bearing_deg) % 360)
    return Transition(d, b, geo.cardinal8(b))


# --- discovery and selection --------------------------------------------------


@dataclass(frozen=True)
class Candidate:
    node_id: str
    kind: NodeKind
    group: str
    hops: int
    distance_m: float  # anchor distance from the start
    named: bool
    path: Tuple[str, ...]


def geometry_group(node: GraphNode) -> str:
    return {geo.POLYGON: "polygonal", geo.LINESTRING: "linear"}.get(node.geometry.kind, "point")


def discover_destinations(g: SpatialGraph, start: str, cfg: Optional[SrpConfig] = None) -> Dict[str, List[Candidate]]:
    """Breadth-first search from start; every node within max_hops becomes a candidate.

    Each candidate carries its shortest (fewest-edge) path, the first one found
    when neighbours are visited in id order. Groups are sorted by anchor distance
    from the start, then id.
    """
    cfg = cfg or SrpConfig()
    origin = g.node(start)
    parent = {start: None}
    depth = {start: 0}
    queue = deque([start])
    while queue:
        u = queue.popleft()
        if depth[u] == cfg.max_hops:
            continue
        for v in g.neighbors(u):
            if v not in depth:
                depth[v] = depth[u] + 1
                parent[v] = u
                queue.append(v)
    groups: Dict[str, List[Candidate]] = {k: [] for k in GROUPS}
    for nid, h in depth.items():
        if nid == start:
            continue
        path = [nid]
        while parent[path[-1]] is not None:
            path.append(parent[path[-1]])
        node = g.nodes[nid]
        groups[geometry_group(node)].append(
            Candidate(nid, node.kind, geometry_group(node), h, geo.haversine_m(origin.anchor, node.anchor),
                      bool(node.name), tuple(reversed(path)))
        )
    for k in groups:
        groups[k].sort(key=lambda c: (c.distance_m, c.node_id))
    return groups


def select_paths(candidates: Dict[str, List[Candidate]], cfg: Optional[SrpConfig] = None, g: Optional[SpatialGraph] = None):
    """Pick up to per_hop_quota destinations per hop length; returns node-id paths.

    Within a hop length destinations are taken nearest first, named before
    unnamed at equal distance, then by id. When a graph is given, paths whose
    route length exceeds max_path_m are skipped and the next candidate is tried.
    """
    cfg = cfg or SrpConfig()
    pool = [c for group in candidates.values() for c in group]
    pool = [c for c in pool if cfg.min_hops <= c.hops <= cfg.max_hops and c.kind not in cfg.excluded_kinds]
    pool.sort(key=lambda c: (c.hops, c.distance_m, not c.named, c.node_id))
    chosen, taken = [], {}
    for c in pool:
        if taken.get(c.hops, 0) >= cfg.per_hop_quota:
            continue
        if c.distance_m > cfg.max_path_m:
            continue  # the route is at least as long as the straight line
        if g is not None and route_length_m(g, list(c.path)) > cfg.max_path_m:
            continue
        chosen.append(list(c.path))
        taken[c.hops] = taken.get(c.hops, 0) + 1
    return chosen


# --- annotation -----------------------------------------------------------------


def _edge_for(g: SpatialGraph, u: str, v: str) -> GraphEdge:
    edges = g.edges_between(u, v)
    if not edges:
        raise InvalidPath(f"no edge between {u!r} and {v!r}")
    # prefer an edge stored in the direction of travel, so a road reaching a POI reads 'near'
    return min(edges, key=lambda e: (e.src != u, EDGE_PRIORITY.index(e.kind), e.src, e.dst))


def relation_name(g: SpatialGraph, e: GraphEdge) -> str:
    if e.kind == EdgeKind.CROSSING:
        ix = g.nodes[e.dst] if g.nodes[e.dst].kind == NodeKind.INTERSECTION else g.nodes[e.src]
        roads = [r for r in ix.attrs.get("roads", "").split(";") if r]
        return "complex_crossing" if len(roads) > 2 else "intersection"
    if e.kind == EdgeKind.ON_SAME_STREET:
        road = g.nodes.get(e.via) if e.via else None
        return road.label if road is not None else (e.via or "on_same_street")
    return e.kind.value


def _extended(n: GraphNode) -> bool:
    return n.geometry.kind != geo.POINT


def _contact(u: GraphNode, v: GraphNode, here: GeoPoint):
    """(departure point on u, arrival point on v) for moving from u to v, given the current position."""
    if not _extended(u):
        dep = u.anchor
    elif not _extended(v):
        dep = geo.point_to_geometry_m(v.anchor, u.geometry)[1]
    else:
        _, dep, arr = geo.geometry_gap_m(u.geometry, v.geometry)
        return dep, arr
    if not _extended(v):
        return dep, v.anchor
    return dep, geo.point_to_geometry_m(dep, v.geometry)[1]


def _walk(g: SpatialGraph, path: Sequence[str]):
    """Yield (edge, u, v, move legs, trailing leg) along a node path."""
    if len(path) < 2:
        raise InvalidPath("a path needs at least one edge")
    nodes = [g.node(n) for n in path]
    here = nodes[0].anchor
    for i, (u, v) in enumerate(zip(nodes, nodes[1:])):
        e = _edge_for(g, u.id, v.id)
        dep, arr = _contact(u, v, here)
        move = (here, dep) if i > 0 and _extended(u) and here != dep else None
        yield e, u, v, move, (dep, arr)
        here = arr


def route_length_m(g: SpatialGraph, path: Sequence[str]) -> float:
    total = 0.0
    for _, _, _, move, leg in _walk(g, path):
        if move is not None:
            total += geo.haversine_m(*move)
        total += geo.haversine_m(*leg)
    return total


def annotate_path(g: SpatialGraph, path: Sequence[str]) -> AnnotatedPath:
    steps: List[PathStep] = []
    legs = []
    for e, u, v, move, leg in _walk(g, path):
        if move is not None:
            steps.append(MoveStep(Transition.between(*move)))
            legs.append(move)
        triple = Triple(u.label, relation_name(g, e), v.label)
        steps.append(TripleStep(triple, Transition.between(*leg)))
        legs.append(leg)
    start = g.node(path[0])
    return AnnotatedPath(start.label, start.anchor, steps, g.node(path[-1]).label, legs, list(path))


def check_path(p: AnnotatedPath, dist_tol_m=0.1, bearing_tol_deg=1.0) -> List[str]:
    """Problems with a path: broken chaining or transitions that do not recompute."""
    problems = []
    triples = p.triples()
    if not triples:
        return ["path has no triples"]
    if triples[0].source != p.image_id:
        problems.append("first triple does not start at the image")
    for a, b in zip(triples, triples[1:]):
        if a.target != b.source:
            problems.append(f"triples do not chain: {a} then {b}")
    for prev, cur in zip(p.steps, p.steps[1:]):
        if isinstance(prev, MoveStep) and isinstance(cur, MoveStep):
            problems.append("two consecutive move steps")
    for t, (a, b) in zip(p.transitions(), p.legs):
        d = geo.haversine_m(a, b)
        if abs(d - t.distance_m) > dist_tol_m:
            problems.append(f"transition distance {t.distance_m:.2f} != {d:.2f}")
        if d > 0 and t.bearing_deg is not None:
            diff = abs(geo.initial_bearing_deg(a, b) - t.bearing_deg) % 360
            if min(diff, 360 - diff) > bearing_tol_deg:
                problems.append(f"transition bearing {t.bearing_deg:.1f} does not recompute")
    return problems


# --- text form ----------------------------------------------------------------


def render_transition(t: Transition) -> str:
    if t.bearing_deg is None:
        return f"({t.distance_m:.1f}m, -)"
    b = round(t.bearing_deg) % 360
    return f"({t.distance_m:.1f}m, {b}°({geo.cardinal8(float(b))}))"


def render_triple(t: Triple) -> str:
    if t.relation == "intersection":
        return f"({t.source}, {t.target})"
    return f"({t.source}, {t.relation}, {t.target})"


def render_srp(p: AnnotatedPath) -> str:
    parts = []
    for s in p.steps:
        if isinstance(s, MoveStep):
            parts.append(render_transition(s.transition))
        else:
            text = render_triple(s.triple)
            if s.trailing is not None:
                text += " " + render_transition(s.trailing)
            parts.append(text)
    text = " -> ".join(parts) + "."
    if p.origin is not None:
        text += (
            f" Based on the spatial context, you can reach {p.destination} from the current image location "
            f"at ({p.origin.lon:.4f}, {p.origin.lat:.4f})."
        )
    return text


_TRANSITION_RE = re.compile(
    r"^\s*(\d+(?:\.\d+)?)\s*m\s*,\s*(?:(-)|(\d+(?:\.\d+)?)\s*°\s*\(?\s*(NE|NW|SE|SW|N|E|S|W)\s*\)?)\s*$"
)
_CLOSING_RE = re.compile(
    r"\s*Based on the spatial context, you can reach (.+) from the current image location at "
    r"\((-?\d+(?:\.\d+)?), (-?\d+(?:\.\d+)?)\)\.?\s*$",
    re.S,
)
_ARROW_RE = re.compile(r"\s*(?:->|→)\s*")


def _groups(step: str, base: int):
    """Top-level parenthesised groups of a step as (content, offset) pairs."""
    out, depth, start = [], 0, None
    for i, ch in enumerate(step):
        if ch == "(":
            if depth == 0:
                start = i
            depth += 1
        elif ch == ")":
            depth -= 1
            if depth < 0:
                raise ParseError("unbalanced ')'", base + i)
            if depth == 0:
                out.append((step[start + 1 : i], base + start))
        elif depth == 0 and not ch.isspace():
            raise ParseError(f"unexpected {ch!r} outside parentheses", base + i)
    if depth != 0:
        raise ParseError("unbalanced '('", base + (start or 0))
    return out


def _parse_transition(content: str, offset: int) -> Optional[Transition]:
    m = _TRANSITION_RE.match(content)
    if not m:
        return None
    d = float(m.group(1))
    if m.group(2):
        return Transition(d, None, None)
    b = float(m.group(3))
    if b >= 360:
        raise ParseError(f"bearing {b} out of range", offset)
    if geo.cardinal8(b) != m.group(4):
        raise ParseError(f"cardinal {m.group(4)} does not match bearing {b:g}", offset)
    return Transition(d, b, m.group(4))


def _parse_triple(content: str, offset: int) -> Triple:
    parts = [p.strip() for p in content.split(", ")]
    if any(not p for p in parts) or len(parts) < 2:
        raise ParseError(f"malformed triple ({content})", offset)
    if len(parts) == 2:
        return Triple(parts[0], "intersection", parts[1])
    for k in range(1, len(parts) - 1):
        if parts[k] in KNOWN_RELATIONS:
            return Triple(", ".join(parts[:k]), parts[k], ", ".join(parts[k + 1 :]))
    if len(parts) == 3:
        return Triple(*parts)
    raise ParseError(f"ambiguous triple ({content})", offset)


def _split_steps(body: str):
    """Split on arrows that sit outside parentheses; yields (step text, offset)."""
    depth, start, i = 0, 0, 0
    while i < len(body):
        ch = body[i]
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
        elif depth == 0:
            m = _ARROW_RE.match(body, i)
            if m and m.group(0).strip():
                yield body[start:i], start
                start = i = m.end()
                continue
        i += 1
    yield body[start:], start


def parse_srp(text: str) -> AnnotatedPath:
    """Inverse of render_srp; also accepts spaced units, '→' arrows and '52°NE' style bearings."""
    if not isinstance(text, str) or not text.strip():
        raise ParseError("empty path text", 0)
    destination, origin = None, None
    body = text
    m = _CLOSING_RE.search(text)
    if m:
        destination = m.group(1).strip()
        origin = GeoPoint(float(m.group(2)), float(m.group(3)))
        body = text[: m.start()]
    body = body.rstrip()
    if body.endswith("."):
        body = body[:-1]
    steps: List[PathStep] = []
    for chunk, off in _split_steps(body):
        lead = len(chunk) - len(chunk.lstrip())
        groups = _groups(chunk.strip(), off + lead)
        if not groups:
            raise ParseError("empty step", off)
        first, foff = groups[0]
        t = _parse_transition(first, foff)
        if t is not None:
            if len(groups) != 1:
                raise ParseError("a movement step holds exactly one transition", foff)
            if steps and isinstance(steps[-1], MoveStep):
                raise ParseError("two consecutive movement steps", foff)
            steps.append(MoveStep(t))
            continue
        triple = _parse_triple(first, foff)
        trailing = None
        if len(groups) == 2:
            trailing = _parse_transition(groups[1][0], groups[1][1])
            if trailing is None:
                raise ParseError(f"expected a transition after triple, got ({groups[1][0]})", groups[1][1])
        elif len(groups) > 2:
            raise ParseError("too many groups in one step", groups[2][1])
        steps.append(TripleStep(triple, trailing))
    triples = [s.triple for s in steps if isinstance(s, TripleStep)]
    if not triples:
        raise ParseError("path has no triples", 0)
    return AnnotatedPath(triples[0].source, origin, steps, destination or triples[-1].target)


# --- training records ---------------------------------------------------------


def wkt_like(node: GraphNode) -> str:
    if node.geometry.kind == geo.POINT:
        return f"POINT(lon: {node.anchor.lon:.8f}, lat: {node.anchor.lat:.8f})"
    name = "LINE" if node.geometry.kind == geo.LINESTRING else "POLYGON"
    pts = "; ".join(f"lon: {p.lon:.8f}, lat: {p.lat:.8f}" for p in node.geometry.points)
    return f"{name}({pts})"


def entity_block(g: SpatialGraph, p: AnnotatedPath) -> Dict[str, dict]:
    """Entities named by the path, keyed by label in order of first mention."""
    ids = list(dict.fromkeys(p.node_ids))
    for nid in p.node_ids:
        for e in g.incident(nid):
            if e.kind == EdgeKind.ON_SAME_STREET and e.via and e.via not in ids and e.via in g.nodes:
                if {e.src, e.dst} <= set(p.node_ids):
                    ids.append(e.via)
    out = {}
    for nid in ids:
        n = g.nodes[nid]
        out.setdefault(n.label, {"id": n.id, "category": str(n.category), "coordinates": wkt_like(n)})
    return out


def reach_sentence(p: AnnotatedPath) -> str:
    return (
        f"You can reach {p.destination} from the current location shown in the image with id {p.image_id} "
        f"at ({p.origin.lon:.4f}, {p.origin.lat:.4f})."
    )


def emit_training_samples(g: SpatialGraph, image_id: str, paths: Sequence[AnnotatedPath], stage: int,
                          image_path: str, subgraph_file: Optional[str] = None) -> List[dict]:
    """Training records in the published sample layout, one per path."""
    if stage not in (1, 2):
        raise ConfigError(f"stage must be 1 or 2, got {stage!r}")
    if stage == 2 and not subgraph_file:
        raise ConfigError("stage 2 samples need a subgraph file")
    records = []
    for p in paths:
        srp = render_srp(p)
        positive = [[{"role": "user", "content": f"Spatial Reasoning Path:\n{srp}"}]]
        if stage == 1:
            records.append({
                "messages": [{"role": "user", "content": STAGE1_INSTRUCTION}],
                "positive_messages": positive,
                "label": 1,
                "images": [image_path],
                "graphs": [],
                "pair_type": "stage1_image_only",
            })
            continue
        coords = f"({p.origin.lon:.4f}, {p.origin.lat:.4f})"
        summary = reach_sentence(p)
        content = (
            f"<graph><image> {NOTATION_NOTE} Based on the spatial context represented in graph and the spatial "
            f"reasoning path, you can reach {p.destination} from the current location shown in the image with id "
            f"{image_id} at {coords}.\nHere are relevant place entities informations: {entity_block(g, p)!r}"
        )
        records.append({
            "messages": [{"role": "user", "content": content}, {"role": "assistant", "content": summary}],
            "positive_messages": positive,
            "label": 1,
            "images": image_path,
            "graphs": [subgraph_file],
            "summarization": summary,
            "image_coordinates": coords,
            "mapillary_node": image_id,
            "pair_type": "stage2_fusion",
        })
    return records


def caption_samples(image_path: str, caption: str, subgraph_file: Optional[str] = None) -> List[dict]:
    """Image-caption (stage 1) and image-graph context (stage 2) records for a supplied caption."""
    from .encoder.instructions import template

    positive = [[{"role": "user", "content": caption}]]
    out = [{
        "messages": [{"role": "user", "content": "<image> " + template(1, "caption").text}],
        "positive_messages": positive,
        "label": 1,
        "images": [image_path],
        "graphs": [],
        "pair_type": "stage1_image_only",
    }]
    if subgraph_file:
        out.append({
            "messages": [{"role": "user", "content": "<graph><image> " + template(2, "context").text}],
            "positive_messages": positive,
            "label": 1,
            "images": [image_path],
            "graphs": [subgraph_file],
            "pair_type": "stage2_fusion",
        })
    return out


def generate_srps(g: SpatialGraph, image_id: str, cfg: Optional[SrpConfig] = None) -> List[AnnotatedPath]:
    cfg = cfg or SrpConfig()
    paths = select_paths(discover_destinations(g, image_id, cfg), cfg, g)
    return [annotate_path(g, p) for p in paths]

