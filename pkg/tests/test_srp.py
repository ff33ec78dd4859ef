
import pytest
from oracles import naive_simple_paths

from citygraph.build import anchor_image, build_graph
from citygraph.errors import ConfigError, ParseError, UnknownNode
from citygraph.geo import GeoPoint, Geometry, Transition
from citygraph.graph import EdgeKind, GraphEdge, GraphNode, NodeKind, SpatialGraph
from citygraph.srp import (
    Candidate,
    InvalidPath,
    MoveStep,
    SrpConfig,
    Triple,
    annotate_path,
    check_path,
    discover_destinations,
    emit_training_samples,
    entity_block,
    generate_srps,
    parse_srp,
    render_srp,
    select_paths,
)
from citygraph.synth import KALLANG_IMAGE_ID, kallang_fixture, synthetic_city

PAPER_FIRST_STEP = "(539125490832143, nearest, Kallang Road) (2.0m, 342°(N))"


@pytest.fixture(scope="module")
def kallang():
    nodes, iid, p = kallang_fixture()
    g = build_graph(nodes)
    anchor_image(g, iid, p)
    return g


@pytest.fixture(scope="module")
def city():
    return build_graph(synthetic_city(n_roads=40, n_pois=100, n_aois=5, n_viewpoints=30, n_transit=5, seed=21))


def all_candidate_paths(g, limit=None):
    out = []
    for v in g.nodes_of_kind(NodeKind.VIEWPOINT):
        groups = discover_destinations(g, v.id, SrpConfig(max_hops=4))
        for c in sorted((c for grp in groups.values() for c in grp), key=lambda c: c.node_id):
            out.append(annotate_path(g, list(c.path)))
            if limit and len(out) >= limit:
                return out
    return out


def chain_graph(n):
    g = SpatialGraph()
    for i in range(n):
        g.add_node(GraphNode(id=f"n{i}", kind=NodeKind.POI, geometry=Geometry.point(0.001 * i, 0.0), name=f"N{i}"))
    for i in range(n - 1):
        g.add_edge(GraphEdge(f"n{i}", f"n{i + 1}", EdgeKind.ON_SAME_STREET, 111.2, 90.0))
    return g


class TestDiscovery:
    def test_isolated_start(self):
        g = build_graph([GraphNode(id="v", kind=NodeKind.VIEWPOINT, geometry=Geometry.point(0, 0))])
        assert all(not v for v in discover_destinations(g, "v").values())

    def test_unknown_start(self, kallang):
        with pytest.raises(UnknownNode):
            discover_destinations(kallang, "missing")

    def test_chain_matches_dfs(self):
        g = chain_graph(5)
        adj = {n: set(g.neighbors(n)) for n in g.nodes}
        for start in g.nodes:
            got = {c.node_id for grp in discover_destinations(g, start, SrpConfig(max_hops=3, min_hops=1)).values() for c in grp}
            want = {p[-1] for p in naive_simple_paths(adj, start, 3)}
            assert got == want

    def test_random_small_graphs_match_dfs(self):
        for seed in range(5):
            g = build_graph(synthetic_city(n_roads=8, n_pois=20, n_aois=2, n_viewpoints=5, seed=seed))
            if len(g.nodes) > 50:
                continue
            adj = {n: set(g.neighbors(n)) for n in g.nodes}
            for v in g.nodes_of_kind(NodeKind.VIEWPOINT):
                groups = discover_destinations(g, v.id, SrpConfig(max_hops=4))
                got = {c.node_id: c.hops for grp in groups.values() for c in grp}
                paths = naive_simple_paths(adj, v.id, 4)
                want = {}
                for p in paths:
                    want[p[-1]] = min(want.get(p[-1], 99), len(p) - 1)
                assert got == want

    def test_polygon_grouping(self):
        ring = [(0, 0), (0.001, 0), (0.001, 0.001), (0, 0.001), (0, 0)]
        nodes = [
            GraphNode(id="park", kind=NodeKind.AOI, geometry=Geometry.polygon(ring), name="Park"),
            GraphNode(id="r", kind=NodeKind.ROAD, geometry=Geometry.linestring([(-0.001, 0.0005), (0.002, 0.0005)])),
            GraphNode(id="v", kind=NodeKind.VIEWPOINT, geometry=Geometry.point(-0.0005, 0.0006)),
        ]
        groups = discover_destinations(build_graph(nodes), "v")
        assert [c.node_id for c in groups["polygonal"]] == ["park"]
        assert [c.node_id for c in groups["linear"]] == ["r"]


def cand(nid, hops, d, kind=NodeKind.POI, named=True):
    return Candidate(nid, kind, "point", hops, d, named, tuple(f"x{i}" for i in range(hops)) + (nid,))


class TestSelection:
    def test_one_per_hop_length(self):
        groups = {"point": [cand("a", 2, 10), cand("b", 2, 5), cand("c", 3, 1), cand("d", 4, 7)]}
        paths = select_paths(groups, SrpConfig())
        assert [p[-1] for p in paths] == ["b", "c", "d"]

    def test_intersections_excluded(self):
        groups = {"point": [cand(f"i{k}", 2 + k, 10, kind=NodeKind.INTERSECTION) for k in range(3)]}
        assert select_paths(groups, SrpConfig()) == []

    def test_nothing_long_enough(self):
        assert select_paths({"point": [cand("a", 1, 3)]}, SrpConfig()) == []

    def test_named_first_at_equal_distance(self):
        groups = {"point": [cand("a", 2, 10, named=False), cand("b", 2, 10)]}
        assert select_paths(groups, SrpConfig())[0][-1] == "b"

    def test_bad_config(self):
        with pytest.raises(ConfigError):
            SrpConfig(min_hops=5, max_hops=2)


class TestAnnotate:
    def test_kallang_first_step(self, kallang):
        p = annotate_path(kallang, [KALLANG_IMAGE_ID, "kallang_rd"])
        assert p.hops == 1
        text = render_srp(p)
        assert text.startswith(PAPER_FIRST_STEP)
        assert text.endswith("from the current image location at (103.8693, 1.3100).")

    def test_kallang_longer_path(self, kallang):
        paths = generate_srps(kallang, KALLANG_IMAGE_ID)
        assert paths
        for p in paths:
            text = render_srp(p)
            assert text.startswith(PAPER_FIRST_STEP + " -> (3.2m, 72°(E)) -> (Kallang Road, Intersection of Geylang Road and Kallang Road)")
            assert check_path(p) == []

    def test_transitions_recompute(self, city):
        paths = all_candidate_paths(city, limit=500)
        assert len(paths) == 500
        for p in paths:
            assert check_path(p) == []
            assert len(p.legs) == len(p.transitions())

    def test_zero_length_hop(self):
        g = SpatialGraph()
        for nid in ("a", "b"):
            g.add_node(GraphNode(id=nid, kind=NodeKind.POI, geometry=Geometry.point(1, 1), name=nid.upper()))
        g.add_edge(GraphEdge("a", "b", EdgeKind.ON_SAME_STREET, 0.0, 0.0))
        p = annotate_path(g, ["a", "b"])
        t = p.steps[0].trailing
        assert t.distance_m == 0.0 and t.bearing_deg is None
        assert "(0.0m, -)" in render_srp(p)

    def test_broken_adjacency(self, kallang):
        with pytest.raises(InvalidPath):
            annotate_path(kallang, [KALLANG_IMAGE_ID, "banyan"])


class TestRenderParse:
    def test_round_trip_thousand(self, city):
        paths = all_candidate_paths(city, limit=1000)
        assert len(paths) == 1000
        for p in paths:
            assert parse_srp(render_srp(p)) == p.quantized()

    def test_render_injective(self, city):
        paths = all_candidate_paths(city, limit=600)
        texts = [render_srp(p) for p in paths]
        distinct = {repr(p.quantized()) for p in paths}
        assert len(set(texts)) == len(distinct)

    def test_main_text_variant(self):
        p = parse_srp("(img1, nearest, Robert F. Kennedy Bridge) (10.6 m, 52°NE) → (789 m, 143° SE) → (Robert F. Kennedy Bridge, 21st Street)")
        assert p.steps[0].trailing == Transition(10.6, 52.0, "NE")
        assert p.steps[1] == MoveStep(Transition(789.0, 143.0, "SE"))
        assert p.steps[2].triple == Triple("Robert F. Kennedy Bridge", "intersection", "21st Street")
        assert render_srp(p).startswith("(img1, nearest, Robert F. Kennedy Bridge) (10.6m, 52°(NE)) -> (789.0m, 143°(SE))")

    def test_published_sample_parses(self):
        sample = (
            "(539125490832143, nearest, Kallang Road) (2.0m, 342°(N)) ->\n (3.2m, 72°(E)) ->\n"
            " (Kallang Road, Intersection of Geylang Road and Kallang Road) ->\n (375.8m, 206°(SW)) ->\n"
            " (Geylang Road, near, Kallang Riverside Park North) ->\n"
            " (Kallang Riverside Park North, bounds, Kampong Bugis) ->\n (193.5m, 263°(W)) ->\n"
            " (Kampong Bugis, near, Banyan Tree & Ruin) (28.4m, 114°(SE)).\n"
            " Based on the spatial context, you can reach Banyan Tree & Ruin\n"
            " from the current image location at (103.8693, 1.3100)."
        )
        p = parse_srp(sample)
        assert p.hops == 5 and p.destination == "Banyan Tree & Ruin"
        assert p.origin == GeoPoint(103.8693, 1.31)
        assert [t.cardinal for t in p.transitions()] == ["N", "E", "SW", "W", "SE"]

    @pytest.mark.parametrize(
        "text, offset",
        [
            ("garbage", 0),
            ("(a, near, b) -> (12m, 400°(N))", 16),
            ("(a, near, b) (3.0m, 10°(S))", 13),
            ("(a, near, b) -> oops (c, near, d)", 16),
            ("(a, near, b) -> (1.0m, 0°(N)) -> (2.0m, 0°(N))", 33),
            ("(a, near, b", 0),
        ],
    )
    def test_garbage(self, text, offset):
        with pytest.raises(ParseError) as exc:
            parse_srp(text)
        assert exc.value.offset == offset

    def test_empty(self):
        with pytest.raises(ParseError):
            parse_srp("   ")


class TestValiditySuite:
    def test_emitted_paths_valid(self, city):
        cfg = SrpConfig()
        n = 0
        for v in city.nodes_of_kind(NodeKind.VIEWPOINT):
            paths = generate_srps(city, v.id, cfg)
            hops = [p.hops for p in paths]
            assert len(hops) == len(set(hops))
            for p in paths:
                assert cfg.min_hops <= p.hops <= cfg.max_hops
                assert check_path(p) == []
                n += 1
        assert n > 0


class TestSamples:
    def test_stage1(self, kallang):
        paths = generate_srps(kallang, KALLANG_IMAGE_ID)
        recs = emit_training_samples(kallang, KALLANG_IMAGE_ID, paths, 1, "images/539125490832143.jpg")
        assert recs[0]["graphs"] == [] and recs[0]["pair_type"] == "stage1_image_only"
        assert recs[0]["messages"][0]["content"].startswith("<image> Describe if this viewpoint is reachable")
        assert recs[0]["label"] == 1

    def test_stage2(self, kallang):
        paths = generate_srps(kallang, KALLANG_IMAGE_ID)
        recs = emit_training_samples(kallang, KALLANG_IMAGE_ID, paths, 2, "images/x.jpg", "subgraphs/x.json")
        content = recs[0]["messages"][0]["content"]
        assert content.startswith("<graph><image> Note on path notation")
        assert recs[0]["graphs"] == ["subgraphs/x.json"]
        assert recs[0]["summarization"] == recs[0]["messages"][1]["content"]
        assert recs[0]["image_coordinates"] == "(103.8693, 1.3100)"

    def test_stage2_needs_subgraph(self, kallang):
        with pytest.raises(ConfigError):
            emit_training_samples(kallang, KALLANG_IMAGE_ID, [], 2, "x.jpg")

    def test_entity_block_covers_triples(self, city):
        for v in city.nodes_of_kind(NodeKind.VIEWPOINT)[:10]:
            for p in generate_srps(city, v.id):
                block = entity_block(city, p)
                named = {t.source for t in p.triples()} | {t.target for t in p.triples()}
                assert named <= set(block)
