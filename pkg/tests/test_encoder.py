import csv
import math
import random

import numpy as np
import pytest

from citygraph.build import build_graph, measure_edge
from citygraph.errors import ConfigError, FormatVersionError, NumericError, ParseError, ShapeError, UnknownNode
from citygraph.geo import GeoPoint, Geometry
from citygraph.graph import EdgeKind, GraphEdge, GraphNode, NodeKind
from citygraph.subgraph import extract_subgraph
from citygraph.synth import synthetic_city
from citygraph.encoder import features as F
from citygraph.encoder.checkpoint import load_params, save_params
from citygraph.encoder.instructions import TEMPLATES, template
from citygraph.encoder.loss import infonce, infonce_loss
from citygraph.encoder.model import (
    EncoderConfig,
    EncoderParams,
    encode_edges,
    encode_nodes,
    gatv2_layer,
    graph_embedding,
    graph_forward,
)
from citygraph.encoder.toy import separable_pairs
from citygraph.encoder.train import (
    Adam,
    ContrastiveBatch,
    TrainConfig,
    grad_check,
    loss_and_grad,
    retrieval_hit_at_1,
    stage_learning_rates,
    train_toy,
    write_training_log,
)

SMALL = EncoderConfig(hidden_dim=16, pe_dim=8, edge_dim=8, token_dim=8, vocab_size=512, num_heads=2)


def poi(nid, lon, lat, name=None, **attrs):
    return GraphNode(id=nid, kind=NodeKind.POI, geometry=Geometry.point(lon, lat), name=name, attrs=attrs)


def on_street(a, b):
    return GraphEdge(a.id, b.id, EdgeKind.ON_SAME_STREET, *measure_edge(a, b, EdgeKind.ON_SAME_STREET)[:2])


def four_node_graph(i=0, words=("cafe", "market", "school")):
    lon, lat = 103.80 + 0.01 * i, 1.30
    nodes = [GraphNode(id=f"v{i}", kind=NodeKind.VIEWPOINT, geometry=Geometry.point(lon, lat))]
    nodes += [poi(f"p{i}{k}", lon + 0.0003 * (k + 1), lat + 0.0002 * (2 - k), f"{w} {i}") for k, w in enumerate(words)]
    edges = [on_street(nodes[0], nodes[1]), on_street(nodes[1], nodes[2]), on_street(nodes[1], nodes[3])]
    return nodes, edges, f"v{i}"


def four_node_batch(cfg):
    gs = [F.prepare_graph(*four_node_graph(i), cfg) for i in range(3)]
    return ContrastiveBatch(gs, ["cafe zero market", "school one", "market two cafe"])


@pytest.fixture(scope="module")
def city():
    return build_graph(synthetic_city(n_roads=20, n_pois=60, n_aois=3, n_viewpoints=10, seed=4))


class TestSpatialPE:
    def test_deterministic_and_bounded(self):
        p = GeoPoint(103.85, 1.3)
        a, b = F.spatial_pe(p, EncoderConfig()), F.spatial_pe(p, EncoderConfig())
        assert np.array_equal(a, b) and a.shape == (64,)
        assert np.all(np.abs(a) <= 1.0)

    def test_closed_form_component(self):
        cfg = EncoderConfig()
        K = cfg.pe_dim // 4
        v = F.spatial_pe(GeoPoint(90.0, 0.0), cfg)
        assert abs(v[2 * (K - 1)]) < 1e-12  # lon, k = K-1, sin: sin(2*pi*1*0.5)
        assert v[2 * (K - 1) + 1] == pytest.approx(-1.0, abs=1e-12)

    def test_against_loop_oracle(self):
        cfg = EncoderConfig(pe_dim=12, f_min=0.01, f_max=2.0)
        p = GeoPoint(-73.95, 40.78)
        K = 3
        want = []
        for c in (p.lon / 180, p.lat / 90):
            for k in range(K):
                f = 0.01 * (2.0 / 0.01) ** (k / (K - 1))
                want += [math.sin(2 * math.pi * f * c), math.cos(2 * math.pi * f * c)]
        assert np.allclose(F.spatial_pe(p, cfg), want, atol=1e-14)

    def test_bad_pe_dim(self):
        with pytest.raises(ConfigError):
            EncoderConfig(pe_dim=30)
        with pytest.raises(ConfigError):
            EncoderConfig(hidden_dim=30, num_heads=4)


class TestNodeEncoder:
    def test_tokenize(self):
        assert F.tokenize("Banyan Tree & Ruin, 12th-St") == ["banyan", "tree", "ruin", "12th", "st"]
        assert F.token_ids("", 100) == []

    def test_empty_text_uses_only_pe(self):
        p = EncoderParams.init(SMALL, 1)
        n = GraphNode(id="v", kind=NodeKind.VIEWPOINT, geometry=Geometry.point(2.0, 48.0))
        s = extract_subgraph(build_graph([n]), "v")
        H = encode_nodes(s, p)
        x = np.concatenate([np.zeros(SMALL.token_dim), F.spatial_pe(n.anchor, SMALL)])
        assert np.allclose(H[0], x @ p["node_proj.W"] + p["node_proj.b"], atol=1e-14)

    def test_identical_nodes_identical_rows(self):
        p = EncoderParams.init(SMALL, 1)
        g = F.prepare_graph([poi("a", 1, 1, "Same Name"), poi("b", 1, 1, "Same Name")], [], "a", SMALL)
        from citygraph.encoder.model import node_inputs

        H = node_inputs(p, g)
        assert np.array_equal(H[0], H[1])

    def test_mean_pool_matches_loop(self):
        p = EncoderParams.init(SMALL, 2)
        nodes = [poi("a", 1, 1, "Kallang Riverside Park North", district="Kallang"), poi("b", 1.001, 1, None)]
        g = F.prepare_graph(nodes, [], "a", SMALL)
        from citygraph.encoder.model import node_inputs

        X = node_inputs(p, g)
        for i, n in enumerate(nodes):
            ids = F.token_ids(F.node_text(n), SMALL.vocab_size)
            acc = np.zeros(SMALL.token_dim)
            for t in ids:
                acc = acc + p["token_table"][t]
            want = acc / len(ids) if ids else acc
            assert np.allclose(X[i, : SMALL.token_dim], want, atol=1e-14)

    def test_external_text_vectors(self):
        p = EncoderParams.init(SMALL, 2)
        vec = np.arange(SMALL.token_dim, dtype=float)
        g = F.prepare_graph([poi("a", 1, 1, "Whatever")], [], "a", SMALL, text_vectors={"a": vec})
        from citygraph.encoder.model import node_inputs

        assert np.array_equal(node_inputs(p, g)[0, : SMALL.token_dim], vec)


class TestEdgeFeatures:
    def test_zero_length(self):
        a = GeoPoint(1, 1)
        assert list(F.raw_edge_features(0.0, 123.0, a, a)) == [0.0, 0.0, 1.0, 0.0, 0.0]

    def test_log_distance(self):
        a = GeoPoint(1, 1)
        assert F.raw_edge_features(math.e - 1, 0.0, a, a)[0] == pytest.approx(1.0, abs=1e-15)

    def test_recompute_from_coordinates(self, city):
        for v in city.nodes_of_kind(NodeKind.VIEWPOINT):
            s = extract_subgraph(city, v.id)
            g = F.subgraph_input(s, SMALL)
            for k, e in enumerate(s.edges):
                src, dst = city.nodes[e.src], city.nodes[e.dst]
                d, b, _ = measure_edge(src, dst, e.kind)
                want = F.raw_edge_features(d, b, src.anchor, dst.anchor)
                assert np.allclose(g.raw[2 * k], want, rtol=1e-6, atol=1e-9)
                back = g.raw[2 * k + 1]
                assert np.allclose(back[[0, 3, 4]], want[[0, 3, 4]] * [1, -1, -1], rtol=1e-6, atol=1e-9)
                if d > 0:
                    assert np.allclose(back[1:3], -want[1:3], atol=1e-9)

    def test_encode_edges_shape(self, city):
        p = EncoderParams.init(SMALL, 0)
        s = extract_subgraph(city, city.nodes_of_kind(NodeKind.VIEWPOINT)[0].id)
        assert encode_edges(s, p).shape == (len(s.edges), SMALL.edge_dim)


def dense_gatv2(H, E, pairs, lp, cfg, use_norm=True):
    """Loop-based reference written directly from the layer definition."""
    n, d = H.shape
    K, dh = cfg.num_heads, cfg.head_dim
    out = np.zeros_like(H)
    for i in range(n):
        msg = np.zeros(d)
        incoming = [(j, k) for k, (r, j) in enumerate(pairs) if r == i]
        for h in range(K):
            sl = slice(h * dh, (h + 1) * dh)
            scores = []
            for j, k in incoming:
                u = (H[i] @ lp["W_s"])[sl] + (H[j] @ lp["W_t"])[sl] + (E[k] @ lp["W_e"])[sl]
                z = np.array([x if x > 0 else cfg.leaky_slope * x for x in u])
                scores.append(float(np.dot(lp["a"][sl], z)))
            mx = max(scores)
            w = [math.exp(s - mx) for s in scores]
            tot = sum(w)
            for (j, _), wj in zip(incoming, w):
                msg[sl] += (wj / tot) * (H[j] @ lp["W_t"])[sl]
        pre = H[i] + msg @ lp["W_o"]
        if use_norm:
            mu = pre.mean()
            var = ((pre - mu) ** 2).mean()
            pre = (pre - mu) / math.sqrt(var + 1e-5) * lp["ln_gamma"] + lp["ln_beta"]
        out[i] = pre
    return out


def layer_params(p, l=0):
    return {k.split(".", 1)[1]: v for k, v in p.blocks.items() if k.startswith(f"gat{l}.")}


class TestGATv2:
    def test_single_node_self_loop(self):
        p = EncoderParams.init(SMALL, 3)
        rng = np.random.default_rng(0)
        H = rng.standard_normal((1, SMALL.hidden_dim))
        E = rng.standard_normal((1, SMALL.edge_dim))
        out = gatv2_layer(H, E, ([0], [0]), p, use_norm=False)
        lp = layer_params(p)
        assert np.allclose(out, H + (H @ lp["W_t"]) @ lp["W_o"], atol=1e-13)

    def test_two_node_dense_oracle(self):
        p = EncoderParams.init(SMALL, 4)
        for k in p.blocks:
            if k.startswith("gat0."):
                p.blocks[k] = p.blocks[k] * 0.1 if not k.endswith("ln_gamma") else p.blocks[k]
        rng = np.random.default_rng(1)
        H = rng.standard_normal((2, SMALL.hidden_dim))
        pairs = [(1, 0), (0, 1), (0, 0), (1, 1)]
        E = rng.standard_normal((4, SMALL.edge_dim))
        got = gatv2_layer(H, E, ([r for r, _ in pairs], [s for _, s in pairs]), p)
        assert np.allclose(got, dense_gatv2(H, E, pairs, layer_params(p), SMALL), atol=1e-10, rtol=0)

    def test_permutation_equivariance(self):
        p = EncoderParams.init(SMALL, 5)
        rng = np.random.default_rng(2)
        for trial in range(5):
            n = 8
            pairs = [(i, i) for i in range(n)]
            for _ in range(12):
                a, b = rng.choice(n, 2, replace=False)
                pairs += [(int(a), int(b)), (int(b), int(a))]
            H = rng.standard_normal((n, SMALL.hidden_dim))
            E = rng.standard_normal((len(pairs), SMALL.edge_dim))
            perm = rng.permutation(n)
            inv = np.argsort(perm)
            out = gatv2_layer(H, E, ([r for r, _ in pairs], [s for _, s in pairs]), p)
            pairs2 = [(int(inv[r]), int(inv[s])) for r, s in pairs]
            out2 = gatv2_layer(H[perm], E, ([r for r, _ in pairs2], [s for _, s in pairs2]), p)
            assert np.allclose(out2, out[perm], atol=1e-12)

    def test_shape_error(self):
        p = EncoderParams.init(SMALL, 0)
        with pytest.raises(ShapeError):
            gatv2_layer(np.zeros((2, 5)), np.zeros((2, SMALL.edge_dim)), ([0, 1], [0, 1]), p)


def path_graph(texts):
    nodes = [poi(f"n{i}", 1.0 + 0.0005 * i, 1.0, t) for i, t in enumerate(texts)]
    edges = [on_street(nodes[i], nodes[i + 1]) for i in range(len(nodes) - 1)]
    return nodes, edges


class TestGraphEmbedding:
    def test_deterministic(self, city):
        p = EncoderParams.init(SMALL, 0)
        s = extract_subgraph(city, city.nodes_of_kind(NodeKind.VIEWPOINT)[0].id)
        assert np.array_equal(graph_embedding(s, p), graph_embedding(s, p))

    def test_storage_order_invariant(self, city):
        p = EncoderParams.init(SMALL, 0)
        rng = random.Random(0)
        for v in city.nodes_of_kind(NodeKind.VIEWPOINT)[:5]:
            s = extract_subgraph(city, v.id)
            nodes, edges = s.all_nodes(), list(s.edges)
            a = graph_forward(p, F.prepare_graph(nodes, edges, v.id, SMALL))[0]
            rng.shuffle(nodes)
            rng.shuffle(edges)
            b = graph_forward(p, F.prepare_graph(nodes, edges, v.id, SMALL))[0]
            assert np.allclose(a, b, atol=1e-12)

    def test_receptive_field(self):
        p = EncoderParams.init(SMALL, 6)
        base = ["alpha", "beta", "gamma", "delta", "epsilon"]

        def emb(texts):
            nodes, edges = path_graph(texts)
            return graph_forward(p, F.prepare_graph(nodes, edges, "n0", SMALL))[0][0]

        ref = emb(base)
        for far in (3, 4):
            changed = list(base)
            changed[far] = "something else entirely"
            assert np.array_equal(emb(changed), ref)
        near = list(base)
        near[2] = "something else entirely"
        assert not np.allclose(emb(near), ref)

    def test_missing_center(self, city):
        p = EncoderParams.init(SMALL, 0)
        s = extract_subgraph(city, city.nodes_of_kind(NodeKind.VIEWPOINT)[0].id)
        with pytest.raises(UnknownNode):
            graph_embedding(s, p, center="nope")


def brute_infonce(Q, T, tau):
    total = 0.0
    for i in range(len(Q)):
        cos = [float(np.dot(Q[i], t) / (np.linalg.norm(Q[i]) * np.linalg.norm(t))) for t in T]
        total += -math.log(math.exp(cos[i] / tau) / sum(math.exp(c / tau) for c in cos))
    return total / len(Q)


class TestInfoNCE:
    def test_uniform_batch_of_two(self):
        Q = np.array([[1.0, 0.0], [0.0, 1.0]])
        T = np.array([[1.0, 1.0], [1.0, 1.0]])
        assert infonce_loss(Q, T, 0.05) == pytest.approx(math.log(2), abs=1e-10)

    def test_opposite_pair_closed_form(self):
        Q = np.array([[1.0, 0.0], [-1.0, 0.0]])
        assert infonce_loss(Q, Q.copy(), 1.0) == pytest.approx(math.log(1 + math.exp(-2)), abs=1e-10)

    def test_batch_of_eight_oracle(self):
        rng = np.random.default_rng(7)
        Q, T = rng.standard_normal((8, 16)), rng.standard_normal((8, 16))
        for tau in (0.05, 0.3, 1.0):
            assert infonce_loss(Q, T, tau) == pytest.approx(brute_infonce(Q, T, tau), abs=1e-10)

    def test_uniform_is_log_batch(self):
        Q = np.eye(5)
        T = np.ones((5, 5))
        assert infonce_loss(Q, T, 0.1) == pytest.approx(math.log(5), abs=1e-12)

    def test_decreases_as_positive_aligns(self):
        rng = np.random.default_rng(8)
        Q, T = rng.standard_normal((4, 6)), rng.standard_normal((4, 6))
        prev = infonce_loss(Q, T, 0.5)
        for w in np.linspace(0.1, 1.0, 10):
            T2 = T.copy()
            T2[0] = (1 - w) * T[0] + w * Q[0]
            cur = infonce_loss(Q, T2, 0.5)
            assert cur < prev
            prev = cur

    def test_gradient(self):
        rng = np.random.default_rng(9)
        Q, T = rng.standard_normal((4, 5)), rng.standard_normal((4, 5))
        _, dQ, _ = infonce(Q, T, 0.2)
        eps = 1e-6
        for i, j in [(0, 0), (2, 3), (3, 4)]:
            Qp, Qm = Q.copy(), Q.copy()
            Qp[i, j] += eps
            Qm[i, j] -= eps
            num = (infonce_loss(Qp, T, 0.2) - infonce_loss(Qm, T, 0.2)) / (2 * eps)
            assert dQ[i, j] == pytest.approx(num, rel=1e-6, abs=1e-9)

    def test_zero_norm(self):
        with pytest.raises(NumericError):
            infonce_loss(np.array([[0.0, 0.0], [1.0, 0.0]]), np.eye(2), 0.1)

    def test_batch_too_small(self):
        with pytest.raises(ShapeError):
            infonce_loss(np.ones((1, 3)), np.ones((1, 3)), 0.1)


class TestGradCheck:
    def test_full_model_four_node_batch(self):
        cfg = EncoderConfig()
        r = grad_check(EncoderParams.init(cfg, 0), four_node_batch(cfg), n_samples=120)
        assert r.max_rel_error < 1e-4
        assert r.sampled_params >= 100
        assert all(n > 0 for n in r.samples_per_block.values())
        assert set(r.samples_per_block) == set(EncoderParams.init(SMALL, 0).blocks)

    def test_without_norm(self):
        r = grad_check(EncoderParams.init(SMALL, 1), four_node_batch(SMALL), n_samples=120, use_norm=False)
        assert r.max_rel_error < 1e-4

    def test_linear_toy_is_exact(self):
        # Single-node graphs make every attention weight 1, so with one head and no
        # norm the readout is linear in each scalar parameter, as is the probe.
        cfg = EncoderConfig(hidden_dim=16, pe_dim=8, edge_dim=8, token_dim=8, vocab_size=512, num_heads=1)
        gs = [F.prepare_graph([poi(f"s{i}", 1 + i, 2, f"spot {i}")], [], f"s{i}", cfg) for i in range(3)]
        batch = ContrastiveBatch(gs, ["spot zero", "one", "two spot"])
        rng = np.random.default_rng(0)
        R1, R2 = rng.standard_normal((3, 16)), rng.standard_normal((3, 16))

        def probe(Q, T):
            return float((R1 * Q).sum() + (R2 * T).sum()), R1, R2

        # exact linearity means a large step costs no truncation error and drowns rounding noise
        r = grad_check(EncoderParams.init(cfg, 2), batch, eps=0.5, use_norm=False, objective=probe)
        assert r.sampled_params >= 40
        assert r.max_rel_error < 1e-8

    def test_detects_wrong_gradient(self, monkeypatch):
        import citygraph.encoder.model as M

        real = M.gatv2_backward

        def broken(*a, **k):
            dH, dE, g = real(*a, **k)
            g["W_o"] = g["W_o"] * 1.01
            return dH, dE, g

        monkeypatch.setattr(M, "gatv2_backward", broken)
        r = grad_check(EncoderParams.init(SMALL, 0), four_node_batch(SMALL), n_samples=60)
        assert r.per_block["gat0.W_o"] > 1e-3


class TestTraining:
    def test_zero_lr_keeps_params(self):
        batch = four_node_batch(SMALL)
        p0 = EncoderParams.init(SMALL, 3)
        res = train_toy([batch], SMALL, 2, TrainConfig(steps=5, lr_graph=0.0, lr_text=0.0), params=p0)
        assert all(np.array_equal(res.params[k], p0[k]) for k in p0.blocks)
        assert len(set(res.history)) == 1

    def test_stage2_rate_ratio(self):
        batch = four_node_batch(SMALL)
        res = train_toy([batch], SMALL, 2, TrainConfig(steps=3))
        for rec in res.optimizer.applied:
            for name, lr in rec.items():
                if name in ("token_table", "text_proj.W", "text_proj.b"):
                    assert lr == 5e-6
                else:
                    assert lr == 5e-5
                    assert lr / rec["token_table"] == 10.0

    def test_stage_rates(self):
        p = EncoderParams.init(SMALL, 0)
        assert set(stage_learning_rates(p, 1, TrainConfig()).values()) == {5e-5}
        with pytest.raises(ConfigError):
            stage_learning_rates(p, 3, TrainConfig())

    def test_nan_aborts(self):
        p = EncoderParams.init(SMALL, 0)
        p.blocks["readout.W"][0, 0] = np.nan
        with pytest.raises(NumericError):
            train_toy([four_node_batch(SMALL)], SMALL, 2, TrainConfig(steps=2), params=p)

    def test_sparse_adam_matches_dense(self):
        batch = four_node_batch(SMALL)
        p_fast = EncoderParams.init(SMALL, 4)
        p_ref = p_fast.copy()
        opt = Adam(p_fast, {k: 1e-3 for k in p_fast.blocks})
        m, v = p_ref.zeros_like(), p_ref.zeros_like()
        for t in range(1, 6):
            _, g, _ = loss_and_grad(p_fast, batch)
            opt.step(g)
            _, g, _ = loss_and_grad(p_ref, batch)
            for k, x in p_ref.blocks.items():
                m[k] = 0.9 * m[k] + (1 - 0.9) * g[k]
                v[k] = 0.999 * v[k] + (1 - 0.999) * g[k] * g[k]
                x -= 1e-3 * (m[k] / (1 - 0.9**t)) / (np.sqrt(v[k] / (1 - 0.999**t)) + 1e-8)
        for k in p_ref.blocks:
            assert np.array_equal(p_fast[k], p_ref[k])

    def test_text_queries_stage1(self):
        batch = ContrastiveBatch(["red cafe", "blue market", "green school"], ["cafe red", "market blue", "school green"])
        res = train_toy([batch], SMALL, 1, TrainConfig(steps=20, lr_graph=1e-2))
        assert res.history[-1] < res.history[0]

    def test_log_csv(self, tmp_path):
        res = train_toy([four_node_batch(SMALL)], SMALL, 2, TrainConfig(steps=4))
        write_training_log(tmp_path / "log.csv", res)
        rows = list(csv.reader(open(tmp_path / "log.csv")))
        assert rows[0][:3] == ["step", "loss", "lr:token_table"]
        assert len(rows) == 5 and float(rows[1][1]) == res.history[0]

    def test_bad_batch(self):
        with pytest.raises(ShapeError):
            ContrastiveBatch(["a"], ["b"])
        with pytest.raises(ShapeError):
            ContrastiveBatch(["a", "b"], ["c"])
        with pytest.raises(ConfigError):
            train_toy([], SMALL, 2)

    @pytest.mark.slow
    def test_separable_dataset(self):
        batch = separable_pairs(64, seed=0)
        a = train_toy([batch], EncoderConfig(), 2, TrainConfig(steps=200, seed=0))
        assert a.history[-1] <= 0.5 * a.history[0]
        assert retrieval_hit_at_1(a.params, batch) >= 0.9


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        p = EncoderParams.init(SMALL, 9)
        save_params(p, tmp_path / "p.ckpt")
        q = load_params(tmp_path / "p.ckpt")
        assert q.cfg == p.cfg
        assert all(np.array_equal(p[k], q[k]) for k in p.blocks)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x").write_bytes(b"NOTACKPT" + b"\0" * 20)
        with pytest.raises(ParseError):
            load_params(tmp_path / "x")

    def test_truncated(self, tmp_path):
        p = EncoderParams.init(SMALL, 9)
        save_params(p, tmp_path / "p.ckpt")
        data = (tmp_path / "p.ckpt").read_bytes()
        (tmp_path / "t.ckpt").write_bytes(data[:-16])
        with pytest.raises(ParseError):
            load_params(tmp_path / "t.ckpt")

    def test_version(self, tmp_path):
        p = EncoderParams.init(SMALL, 9)
        save_params(p, tmp_path / "p.ckpt")
        data = (tmp_path / "p.ckpt").read_bytes().replace(b'"version":1', b'"version":7')
        (tmp_path / "v.ckpt").write_bytes(data)
        with pytest.raises(FormatVersionError):
            load_params(tmp_path / "v.ckpt")


class TestInstructions:
    def test_four_templates(self):
        assert {(t.stage, t.variant) for t in TEMPLATES} == {(1, "path"), (1, "caption"), (2, "path"), (2, "context")}

    def test_query_prefix(self):
        q = template(1, "path").query("Banyan Tree & Ruin")
        assert q.startswith("[IMAGE_TOKEN] Instruct: ") and "Banyan Tree & Ruin" in q
        assert template(2, "context").query().startswith("[GRAPH_TOKEN][IMAGE_TOKEN] Instruct: ")

    def test_unknown(self):
        with pytest.raises(ConfigError):
            template(2, "caption")
