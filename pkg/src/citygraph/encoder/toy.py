"""Small synthetic contrastive datasets for exercising the training loop."""

import random

from ..build import anchor_image, build_graph, measure_edge
from ..geo import GeoPoint, Geometry
from ..graph import EdgeKind, GraphEdge, GraphNode, NodeKind
from ..subgraph import ExtractConfig, extract_subgraph
from . import features as F
from .train import ContrastiveBatch

_SYLLABLES = ("ka", "lo", "mi", "ren", "tos", "vu", "sha", "pel", "dor", "qui", "zan", "bex", "ot", "fra", "gil", "hum")


def _word(rng):
    return "".join(rng.choice(_SYLLABLES) for _ in range(3))


def separable_pairs(n=64, seed=0, origin=(103.85, 1.30)):
    """``n`` (subgraph, text) pairs, each built around its own invented place names.

    Every query is a small neighbourhood (one road, two POIs, one viewpoint)
    in its own block of a grid; its target text names the same places, so the
    pairs are separable by construction.
    """
    rng = random.Random(seed)
    used = set()
    queries, targets = [], []
    side = max(1, int(n ** 0.5 + 0.999))
    for i in range(n):
        words = []
        while len(words) < 3:
            w = _word(rng)
            if w not in used:
                used.add(w)
                words.append(w)
        lon = origin[0] + 0.01 * (i % side)
        lat = origin[1] + 0.01 * (i // side)
        road, poi_a, poi_b = words
        nodes = [
            GraphNode(id=f"r{i}", kind=NodeKind.ROAD, name=f"{road.title()} Road",
                      geometry=Geometry.linestring([(lon - 0.001, lat), (lon + 0.001, lat)])),
            GraphNode(id=f"a{i}", kind=NodeKind.POI, name=f"{poi_a.title()} Cafe", category="cafe",
                      geometry=Geometry.point(lon + 0.0003, lat + 0.0002)),
            GraphNode(id=f"b{i}", kind=NodeKind.POI, name=f"{poi_b.title()} Market", category="market",
                      geometry=Geometry.point(lon - 0.0002, lat - 0.0003)),
        ]
        g = build_graph(nodes)
        vid = f"v{i}"
        anchor_image(g, vid, GeoPoint(lon + 0.0001, lat + 0.00005))
        queries.append(extract_subgraph(g, vid, ExtractConfig()))
        targets.append(f"From this viewpoint on {road.title()} Road you can reach {poi_a.title()} Cafe "
                       f"and {poi_b.title()} Market.")
    return ContrastiveBatch(queries, targets)


def four_node_graph(i=0, words=("cafe", "market", "school")):
    """A viewpoint and three named POIs chained by on_same_street edges: (nodes, edges, center)."""
    lon, lat = 103.80 + 0.01 * i, 1.30
    nodes = [GraphNode(id=f"v{i}", kind=NodeKind.VIEWPOINT, geometry=Geometry.point(lon, lat))]
    nodes += [
        GraphNode(id=f"p{i}{k}", kind=NodeKind.POI, name=f"{w} {i}",
                  geometry=Geometry.point(lon + 0.0003 * (k + 1), lat + 0.0002 * (2 - k)))
        for k, w in enumerate(words)
    ]

    def link(a, b):
        return GraphEdge(a.id, b.id, EdgeKind.ON_SAME_STREET, *measure_edge(a, b, EdgeKind.ON_SAME_STREET)[:2])

    edges = [link(nodes[0], nodes[1]), link(nodes[1], nodes[2]), link(nodes[1], nodes[3])]
    return nodes, edges, f"v{i}"


def four_node_batch(cfg):
    """Three 4-node graphs with short texts; the standard gradient-check batch."""
    gs = [F.prepare_graph(*four_node_graph(i), cfg) for i in range(3)]
    return ContrastiveBatch(gs, ["cafe zero market", "school one", "market two cafe"])
