import json
import math
import random

import numpy as np
import pytest

from citygraph import bench, geo
from citygraph.bench import (
    BenchConfig,
    BenchmarkInstance,
    InsufficientEntities,
    MissingEmbeddings,
    PerceptionScheme,
    discretize_perception,
    evaluate,
    gen_geolocation_label,
    gen_spatial_grounding,
    hit_at_k,
    ndcg_at_k,
    rank_candidates,
)
from citygraph.build import anchor_image, build_graph
from citygraph.errors import ConfigError, DataError
from citygraph.geo import GeoPoint, Geometry
from citygraph.graph import GraphNode, NodeKind
from citygraph.synth import synthetic_city

from oracles import dcg_single

# 1/log2(r+1) for r = 1..5, worked out by hand to 17 significant digits
NDCG_VALUES = {1.0, 0.63092975357145743, 0.5, 0.43067655807339306, 0.38685280723454163, 0.0}
PLANTED = [1, 1, 2, 3, 6, 6, 6, 10, 15, 20]


def planted_vectors(rank, n=20):
    """Query plus n 2-D candidates whose cosine order puts candidate 7 at ``rank``."""
    gt = 7
    others = [i for i in range(n) if i != gt]
    order = others[: rank - 1] + [gt] + others[rank - 1 :]
    cands = np.zeros((n, 2))
    for pos, idx in enumerate(order):
        ang = 0.05 * pos
        cands[idx] = [math.cos(ang), math.sin(ang)]
    return np.array([1.0, 0.0]), cands, gt


def planted_fixture(ranks=PLANTED, task="Geolocation", city="Fixture"):
    instances, queries, cands = [], {}, {}
    for i, r in enumerate(ranks):
        q, C, gt = planted_vectors(r)
        iid = f"{task}:{city}:{i}"
        ids = [f"{iid}#{k}" for k in range(len(C))]
        instances.append(BenchmarkInstance(iid, task, city, [{"role": "user", "content": "<image>"}],
                                           [f"c{k}" for k in range(len(C))], gt, ids))
        queries[iid] = q
        cands.update(zip(ids, C))
    return instances, queries, cands


# --- ranking ---------------------------------------------------------------------------


def test_rank_identical_query_wins():
    C = np.eye(6)
    r = rank_candidates(C[3], C)
    assert r.order[0] == 3
    assert r.rank_of(3) == 1


def test_rank_ties_follow_index():
    C = np.ones((20, 4))
    assert rank_candidates(np.ones(4), C).order == tuple(range(20))


def test_rank_matches_full_sort_oracle():
    rng = np.random.default_rng(3)
    for _ in range(50):
        q = rng.normal(size=16)
        C = rng.normal(size=(20, 16))
        C[5] = C[2]  # an exact tie between 2 and 5
        cos = [float(c @ q / (np.linalg.norm(c) * np.linalg.norm(q))) for c in C]
        expected = sorted(range(20), key=lambda i: (-cos[i], i))
        r = rank_candidates(q, C)
        assert list(r.order) == expected
        assert all(a >= b for a, b in zip(r.scores, r.scores[1:]))


def test_rank_scale_invariant():
    rng = np.random.default_rng(4)
    q, C = rng.normal(size=8), rng.normal(size=(20, 8))
    base = rank_candidates(q, C).order
    for s in (1e-6, 0.3, 7.0, 1e6):
        assert rank_candidates(q * s, C * s).order == base


def test_rank_errors_name_ids():
    with pytest.raises(DataError, match="cand-b"):
        rank_candidates(np.ones(3), np.array([[1, 0, 0], [0, 0, 0.0]]), candidate_ids=["cand-a", "cand-b"])
    with pytest.raises(DataError, match="q7"):
        rank_candidates(np.zeros(3), np.eye(3), query_id="q7")
    with pytest.raises(DataError, match="dimension"):
        rank_candidates(np.ones(4), np.eye(3))


# --- metrics ---------------------------------------------------------------------------


@pytest.mark.parametrize("rank,hit,ndcg", [(1, 1, 1.0), (3, 1, 0.5), (5, 1, 0.38685280723454163), (6, 0, 0.0), (7, 0, 0.0)])
def test_metric_values(rank, hit, ndcg):
    q, C, gt = planted_vectors(rank)
    r = rank_candidates(q, C)
    assert r.rank_of(gt) == rank
    assert hit_at_k(r, gt) == hit
    assert ndcg_at_k(r, gt) == pytest.approx(ndcg, abs=1e-15)


def test_ndcg_value_set_is_closed():
    seen = set()
    for rank in range(1, 21):
        q, C, gt = planted_vectors(rank)
        seen.add(ndcg_at_k(rank_candidates(q, C), gt))
    assert len(seen) == 6
    assert all(any(abs(v - w) < 1e-15 for w in NDCG_VALUES) for v in seen)


def test_planted_fixture_report():
    inst, q, c = planted_fixture()
    row = evaluate(inst, q, c).rows[("Geolocation", "Fixture")]
    assert row["hit_at_5"] == 40.0
    assert row["ndcg_at_5"] == pytest.approx(100 * sum(dcg_single(r) for r in PLANTED) / 10, abs=1e-12)
    assert abs(row["ndcg_at_5"] - 31.31) < 0.01
    assert row["n_instances"] == 10


def test_single_instance_perfect():
    inst, q, c = planted_fixture([1])
    row = evaluate(inst, q, c).rows[("Geolocation", "Fixture")]
    assert (row["hit_at_5"], row["ndcg_at_5"]) == (100.0, 100.0)


def test_evaluate_order_independent_and_grouped():
    a = planted_fixture(PLANTED, "NearestPOI", "A")
    b = planted_fixture([2, 9, 4], "Distance", "B")
    inst = a[0] + b[0]
    q = {**a[1], **b[1]}
    c = {**a[2], **b[2]}
    base = evaluate(inst, q, c)
    assert set(base.rows) == {("NearestPOI", "A"), ("Distance", "B")}
    rng = random.Random(1)
    for _ in range(5):
        shuffled = inst[:]
        rng.shuffle(shuffled)
        rep = evaluate(shuffled, q, c)
        assert rep.rows == base.rows
        assert rep.to_csv() == base.to_csv()


def test_evaluate_preflight_lists_every_gap():
    inst, q, c = planted_fixture([1, 2, 3])
    del q[inst[1].id]
    del c[inst[0].candidate_ids[4]]
    del c[inst[2].candidate_ids[0]]
    with pytest.raises(MissingEmbeddings) as ei:
        evaluate(inst, q, c)
    assert sorted(ei.value.missing) == sorted([inst[1].id, inst[0].candidate_ids[4], inst[2].candidate_ids[0]])


def test_report_formats():
    inst, q, c = planted_fixture()
    rep = evaluate(inst, q, c)
    assert rep.to_csv().splitlines() == ["task,city,hit_at_5,ndcg_at_5,n_instances",
                                         "Geolocation,Fixture,40.0000,31.3093,10"]
    assert rep.to_json()["results"][0]["hit_at_5"] == 40.0


# --- files -----------------------------------------------------------------------------


def test_embedding_file_round_trip(tmp_path):
    emb = {"a": np.array([1.0, 2.0]), "b": np.array([-0.5, 0.25])}
    p = tmp_path / "e.jsonl"
    bench.write_embeddings(p, emb)
    back = bench.load_embeddings(p)
    assert set(back) == {"a", "b"} and np.array_equal(back["b"], emb["b"])


@pytest.mark.parametrize("lines,msg", [
    (['{"id": "a", "vector": [1, 2]}', '{"id": "b", "vector": [1, 2, 3]}'], "dimension"),
    (['{"id": "a", "vector": [1, NaN]}'], "non-finite"),
    (['{"id": "a", "vector": [1]}', '{"id": "a", "vector": [2]}'], "duplicate"),
    (['{"vector": [1]}'], "bad embedding"),
])
def test_embedding_file_errors(tmp_path, lines, msg):
    p = tmp_path / "e.jsonl"
    p.write_text("\n".join(lines) + "\n")
    with pytest.raises(DataError, match=msg):
        bench.load_embeddings(p)


def test_instance_json_round_trip(tmp_path):
    inst, _, _ = planted_fixture([3, 4])
    p = tmp_path / "i.jsonl"
    bench.write_instances(p, inst)
    back = bench.load_instances(p)
    assert [b.to_json() for b in back] == [i.to_json() for i in inst]
    rec = json.loads(p.read_text().splitlines()[0])
    assert {"messages", "images", "graphs", "candidates", "ground_truth", "ground_truth_idx"} <= set(rec)


def test_instance_invariants():
    with pytest.raises(DataError):
        BenchmarkInstance("x", "Geolocation", "c", [], ["a", "b"], 2, ["1", "2"])
    with pytest.raises(DataError):
        BenchmarkInstance("x", "Geolocation", "c", [], ["a", "b"], 0, ["1"])


# --- perception ---------------------------------------------------------------------------


def test_perception_quoted_strings():
    s = PerceptionScheme("depressing")
    assert discretize_perception(4.5, s) == "Less depressing, Depressing Score: 4.5"
    assert discretize_perception(2.5, s) == "Not depressing, Depressing Score: 2.5"
    assert discretize_perception(6.0, s) == "Moderately depressing, Depressing Score: 6.0"
    assert discretize_perception(9.0, s) == "Very depressing, Depressing Score: 9.0"


def test_perception_boundaries_single_bin():
    s = PerceptionScheme("safe")
    for lo, hi, adj in s.bins:
        assert discretize_perception(lo, s).startswith(adj + " ")
    assert discretize_perception(10.0, s).startswith("Extremely")
    for x in np.linspace(0, 10, 1001):
        n = sum(lo <= x < hi or (hi == 10.0 and x == 10.0) for lo, hi, _ in s.bins)
        assert n == 1


def test_perception_errors():
    s = PerceptionScheme("lively")
    for bad in (-0.1, 10.01, float("nan")):
        with pytest.raises(DataError):
            discretize_perception(bad, s)
    with pytest.raises(ConfigError):
        PerceptionScheme("scary")
    with pytest.raises(ConfigError):
        PerceptionScheme("safe", ((0, 5, "Low"), (4, 10, "High")))
    with pytest.raises(ConfigError):
        PerceptionScheme("safe", ((0, 5, "Low"), (5, 9, "High")))


def test_perception_instance():
    cfg = BenchConfig()
    inst = bench.gen_perception_instance("img1", 4.5, PerceptionScheme("depressing"), "Singapore", cfg)
    assert len(inst.candidates) == 20 and len(set(inst.candidates)) == 20
    assert inst.ground_truth == "Less depressing, Depressing Score: 4.5"
    again = bench.gen_perception_instance("img1", 4.5, PerceptionScheme("depressing"), "Singapore", cfg)
    assert again.to_json() == inst.to_json()


# --- spatial grounding ------------------------------------------------------------------------


@pytest.fixture(scope="module")
def city():
    nodes = synthetic_city(n_roads=40, n_pois=120, n_aois=6, n_viewpoints=12, seed=5)
    g = build_graph(nodes)
    g.metadata["city"] = "Testville"
    return g


def brute_nearest(g, p, kind):
    best = []
    for n in g.nodes.values():
        if n.kind != kind or not n.name:
            continue
        if n.geometry.kind == geo.POLYGON and geo.point_in_polygon(p, n.geometry):
            d = 0.0
        else:
            d = geo.point_to_geometry_m(p, n.geometry)[0]
        best.append((d, n.id))
    return sorted(best)


def viewpoints(g):
    return sorted(n.id for n in g.nodes_of_kind(NodeKind.VIEWPOINT))


def test_nearest_entities_match_brute_force(city):
    for vid in viewpoints(city):
        p = city.node(vid).anchor
        for kind in (NodeKind.ROAD, NodeKind.POI, NodeKind.AOI, NodeKind.INTERSECTION):
            fast = [(d, i) for d, i, _ in bench.nearest_entities(city, p, kind)]
            slow = brute_nearest(city, p, kind)
            assert [i for _, i in fast] == [i for _, i in slow] or all(
                abs(a[0] - b[0]) < 1e-6 for a, b in zip(fast, slow))
            assert all(abs(a[0] - b[0]) < 1e-6 for a, b in zip(fast, slow))


@pytest.mark.parametrize("task,kind", [(bench.NEAREST_POI, NodeKind.POI), (bench.NEAREST_STREET, NodeKind.ROAD)])
def test_nearest_tasks_truth_is_brute_force_nearest(city, task, kind):
    for vid in viewpoints(city):
        inst = gen_spatial_grounding(city, vid, task)
        assert len(inst.candidates) == 20 and len(set(inst.candidates)) == 20
        p = city.node(vid).anchor
        d_truth = brute_nearest(city, p, kind)[0][0]
        truth_node = city.node(inst.candidate_ids[inst.ground_truth_idx])
        assert truth_node.label == inst.ground_truth
        assert geo.point_to_geometry_m(p, truth_node.geometry)[0] == pytest.approx(d_truth, abs=1e-6)


def test_distance_task(city):
    for vid in viewpoints(city):
        inst = gen_spatial_grounding(city, vid, bench.DISTANCE)
        content = inst.messages[0]["content"]
        assert content.startswith("<image><graph>\nHow far is the nearest ")
        values = [int(c.split()[0]) for c in inst.candidates]
        assert all(c.endswith(" meters") for c in inst.candidates)
        assert len(set(values)) == 20
        truth = values[inst.ground_truth_idx]
        assert sorted(values)[0] == truth or truth == 0


def test_distance_distractor_shape():
    # the published distance sample: 33 m with distractors near 3x, 9x, 15x, 24x, 36x
    d = bench._distance_distractors(33, BenchConfig().distance_multipliers, 5)
    assert d == [99, 297, 495, 792, 1188]
    assert bench._distance_distractors(0, (3, 9), 2) == [3, 9]


def test_distance_direction_task(city):
    for vid in viewpoints(city):
        inst = gen_spatial_grounding(city, vid, bench.DISTANCE_DIRECTION)
        content = inst.messages[0]["content"]
        words = content.split()
        dist = int(words[words.index("approximately") + 1])
        cardinal = words[words.index("meters") + 1]
        assert cardinal in geo.CARDINAL_WORDS.values()
        bearing = {w: b for b, w in ((bench.CARDINAL_BEARINGS[c], geo.CARDINAL_WORDS[c]) for c in geo.CARDINALS)}[cardinal]
        spot = geo.destination_point(city.node(vid).anchor, dist, bearing)
        pool = [city.node(i) for i in inst.candidate_ids]
        best = min(pool, key=lambda n: (bench.entity_distance_m(spot, n), n.id))
        assert best.id == inst.candidate_ids[inst.ground_truth_idx]
        assert len(set(inst.candidates)) == 20


def test_grounding_seeded_and_reproducible(city):
    vid = viewpoints(city)[0]
    a = gen_spatial_grounding(city, vid, bench.NEAREST_POI, BenchConfig(seed=1))
    b = gen_spatial_grounding(city, vid, bench.NEAREST_POI, BenchConfig(seed=1))
    c = gen_spatial_grounding(city, vid, bench.NEAREST_POI, BenchConfig(seed=2))
    assert a.to_json() == b.to_json()
    assert sorted(a.candidates) == sorted(c.candidates)


def test_single_poi_graph_skips():
    nodes = [
        GraphNode("r", NodeKind.ROAD, Geometry.linestring([(103.85, 1.3), (103.86, 1.3)]), name="Only Road"),
        GraphNode("p", NodeKind.POI, Geometry.point(103.851, 1.3001), name="Lonely Cafe", category="cafe"),
    ]
    g = build_graph(nodes)
    anchor_image(g, "v", GeoPoint(103.8505, 1.3))
    with pytest.raises(InsufficientEntities, match="only 1"):
        gen_spatial_grounding(g, "v", bench.NEAREST_POI)
    with pytest.raises(ConfigError):
        gen_spatial_grounding(g, "v", "Teleport")


# --- geolocation --------------------------------------------------------------------------


def queens_fixture():
    lon, lat = -73.9235, 40.7437
    nodes = [
        GraphNode("qb", NodeKind.ROAD, Geometry.linestring([(lon - 0.004, lat), (lon + 0.004, lat)]), name="Queens Blvd"),
        GraphNode("p32", NodeKind.ROAD, Geometry.linestring([(lon + 0.001, lat - 0.003), (lon + 0.001, lat + 0.003)]),
                  name="32 Pl"),
        GraphNode("ss", NodeKind.AOI, Geometry.polygon([(lon - 0.01, lat - 0.01), (lon + 0.01, lat - 0.01),
                                                        (lon + 0.01, lat + 0.01), (lon - 0.01, lat + 0.01),
                                                        (lon - 0.01, lat - 0.01)]), name="Sunnyside"),
    ]
    g = build_graph(nodes)
    g.metadata["city"] = "Queens"
    anchor_image(g, "img", GeoPoint(lon + 0.0007, lat + 0.00005))
    return g


def test_geolocation_label_queens_shape():
    g = queens_fixture()
    assert gen_geolocation_label(g, "img") == \
        "on Queens Blvd, near Intersection of 32 Pl and Queens Blvd, close to Sunnyside, in Sunnyside, Queens"


def test_geolocation_label_without_aoi():
    nodes = [GraphNode("r", NodeKind.ROAD, Geometry.linestring([(103.85, 1.3), (103.86, 1.3)]), name="Only Road")]
    g = build_graph(nodes)
    anchor_image(g, "v", GeoPoint(103.8505, 1.3001))
    label = gen_geolocation_label(g, "v")
    assert label == "on Only Road"
    assert " in " not in label


def test_geolocation_components_brute_force(city):
    for vid in viewpoints(city):
        p = city.node(vid).anchor
        label = gen_geolocation_label(city, vid)
        road = city.node(brute_nearest(city, p, NodeKind.ROAD)[0][1]).label
        assert label.startswith(f"on {road}, ")
        assert label.endswith(", Testville")
        area = city.node(brute_nearest(city, p, NodeKind.AOI)[0][1]).label
        assert f", in {area}, " in label


def test_geolocation_requires_anchor(city):
    with pytest.raises(DataError):
        gen_geolocation_label(city, "road0000")


def test_geolocation_and_retrieval_instances(city):
    vids = viewpoints(city)
    labels = {v: f"label {v}" for v in vids}
    cfg = BenchConfig(candidate_count=10)
    inst = bench.gen_geolocation_instance(city, vids[0], labels, cfg, "Testville")
    assert inst.ground_truth == labels[vids[0]] and len(inst.candidates) == 10
    r = bench.gen_retrieval_instance(vids[0], "Cafe 3", vids, cfg, "Testville")
    assert r.ground_truth == f"images/{vids[0]}.jpg"
    assert r.candidate_ids[r.ground_truth_idx] == f"images/{vids[0]}.jpg"
    with pytest.raises(InsufficientEntities):
        bench.gen_retrieval_instance(vids[0], "x", vids[:3], cfg, "Testville")
