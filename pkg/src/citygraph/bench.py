"""Benchmark instances and embedding-based ranking evaluation.

Every task is a ranking problem: a query embedding is compared by cosine
similarity with the embeddings of a fixed-size candidate list, and the rank
of the single ground-truth candidate gives Hit@k and NDCG@k.
"""

from __future__ import annotations

import csv
import io
import json
import math
import random
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import geo
from .errors import ConfigError, DataError, UnknownNode
from .geo import GeoPoint
from .graph import EdgeKind, GraphNode, NodeKind, SpatialGraph
from .subgraph import ExtractConfig, extract_subgraph

GEOLOCATION = "Geolocation"
IMAGE_RETRIEVAL = "ImageRetrieval"
NEAREST_STREET = "NearestStreet"
NEAREST_POI = "NearestPOI"
DISTANCE = "Distance"
DISTANCE_DIRECTION = "DistanceDirection"
GROUNDING_TASKS = (NEAREST_STREET, NEAREST_POI, DISTANCE, DISTANCE_DIRECTION)
PERCEPTION_ATTRIBUTES = ("safe", "wealthy", "lively", "depressing", "boring", "beautiful")

CARDINAL_BEARINGS = {c: 45.0 * i for i, c in enumerate(geo.CARDINALS)}


def perception_task(attribute: str) -> str:
    return f"Perception({attribute})"


class InsufficientEntities(DataError):
    """Not enough distinct entities to build a full candidate list."""


class MissingEmbeddings(DataError):
    def __init__(self, missing: Sequence[str]):
        self.missing = list(missing)
        shown = ", ".join(self.missing[:20]) + (" ..." if len(self.missing) > 20 else "")
        super().__init__(f"{len(self.missing)} embedding ids missing: {shown}")


@dataclass
class BenchConfig:
    candidate_count: int = 20
    # distractor distances are the true distance times these factors
    distance_multipliers: Tuple[float, ...] = (
        3, 9, 15, 24, 36, 48, 60, 75, 90, 110, 130, 150, 175, 200, 250, 300, 400, 500, 600,
    )
    context: ExtractConfig = field(default_factory=lambda: ExtractConfig(radius_m=400.0, max_nearby=40, max_onehop=40))
    seed: int = 0

    def __post_init__(self):
        if self.candidate_count < 2:
            raise ConfigError("candidate_count must be at least 2")
        if len(self.distance_multipliers) < self.candidate_count - 1:
            raise ConfigError("need candidate_count - 1 distance multipliers")
        if any(m <= 1 for m in self.distance_multipliers):
            raise ConfigError("distance multipliers must exceed 1")

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        if "context" in d:
            d["context"] = ExtractConfig.from_dict(d["context"])
        if "distance_multipliers" in d:
            d["distance_multipliers"] = tuple(d["distance_multipliers"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad bench config: {exc}") from None


@dataclass
class BenchmarkInstance:
    id: str
    task: str
    city: str
    messages: List[dict]
    candidates: List[str]
    ground_truth_idx: int
    candidate_ids: List[str]
    images: List[str] = field(default_factory=list)
    graphs: List[str] = field(default_factory=list)

    def __post_init__(self):
        if not (0 <= self.ground_truth_idx < len(self.candidates)):
            raise DataError(f"instance {self.id}: ground_truth_idx {self.ground_truth_idx} out of range")
        if len(self.candidate_ids) != len(self.candidates):
            raise DataError(f"instance {self.id}: {len(self.candidate_ids)} ids for {len(self.candidates)} candidates")

    @property
    def ground_truth(self):
        return self.candidates[self.ground_truth_idx]

    def to_json(self):
        return {
            "id": self.id, "task": self.task, "city": self.city, "messages": self.messages,
            "images": self.images, "graphs": self.graphs, "candidates": self.candidates,
            "candidate_ids": self.candidate_ids, "ground_truth": self.ground_truth,
            "ground_truth_idx": self.ground_truth_idx,
        }

    @classmethod
    def from_json(cls, obj):
        try:
            inst = cls(
                id=str(obj["id"]), task=obj["task"], city=obj["city"], messages=list(obj["messages"]),
                candidates=list(obj["candidates"]), ground_truth_idx=int(obj["ground_truth_idx"]),
                candidate_ids=list(obj["candidate_ids"]), images=list(obj.get("images") or []),
                graphs=list(obj.get("graphs") or []),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"bad benchmark instance record: {exc}") from None
        if "ground_truth" in obj and obj["ground_truth"] != inst.ground_truth:
            raise DataError(f"instance {inst.id}: ground_truth disagrees with ground_truth_idx")
        return inst


def _rng(seed, instance_id) -> random.Random:
    return random.Random(f"{seed}:{instance_id}")


def _assemble(instance_id, task, city, messages, truth, distractors, ids, rng, images=(), graphs=()):
    """Shuffle truth and distractors together; ``ids[0]`` belongs to the truth."""
    order = list(range(len(distractors) + 1))
    rng.shuffle(order)
    texts = [truth, *distractors]
    return BenchmarkInstance(
        id=instance_id, task=task, city=city, messages=messages,
        candidates=[texts[k] for k in order], ground_truth_idx=order.index(0),
        candidate_ids=[ids[k] for k in order], images=list(images), graphs=list(graphs),
    )


def _text_ids(instance_id, n):
    return [f"{instance_id}#{k}" for k in range(n)]


def _user(content):
    return [{"role": "user", "content": content}]


# --- ranking and metrics --------------------------------------------------------------


@dataclass(frozen=True)
class Ranking:
    order: Tuple[int, ...]
    scores: Tuple[float, ...]  # aligned with ``order``

    def rank_of(self, idx: int) -> int:
        return self.order.index(idx) + 1


def rank_candidates(query, candidates, query_id="query", candidate_ids=None) -> Ranking:
    q = np.asarray(query, dtype=np.float64)
    C = np.asarray(candidates, dtype=np.float64)
    ids = list(candidate_ids) if candidate_ids is not None else [str(k) for k in range(len(C))]
    if C.ndim != 2 or C.shape[1] != q.shape[0]:
        raise DataError(f"dimension mismatch between query {query_id} ({q.shape}) and candidates ({C.shape})")
    qn = np.linalg.norm(q)
    if not qn > 0:
        raise DataError(f"query embedding {query_id} has zero norm")
    cn = np.linalg.norm(C, axis=1)
    bad = np.flatnonzero(~(cn > 0))
    if len(bad):
        raise DataError(f"candidate embedding {ids[bad[0]]} has zero norm")
    scores = (C @ q) / (cn * qn)
    order = np.lexsort((np.arange(len(C)), -scores))
    return Ranking(tuple(int(i) for i in order), tuple(float(scores[i]) for i in order))


def hit_at_k(r: Ranking, gt: int, k: int = 5) -> int:
    return int(r.rank_of(gt) <= k)


def ndcg_at_k(r: Ranking, gt: int, k: int = 5) -> float:
    rank = r.rank_of(gt)
    return 1.0 / math.log2(rank + 1) if rank <= k else 0.0


@dataclass
class EvalReport:
    rows: Dict[Tuple[str, str], Dict[str, float]]

    def to_json(self):
        return {
            "results": [
                {"task": t, "city": c, "hit_at_5": round(v["hit_at_5"], 4), "ndcg_at_5": round(v["ndcg_at_5"], 4),
                 "n_instances": int(v["n_instances"])}
                for (t, c), v in sorted(self.rows.items())
            ]
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["task", "city", "hit_at_5", "ndcg_at_5", "n_instances"])
        for r in self.to_json()["results"]:
            w.writerow([r["task"], r["city"], f"{r['hit_at_5']:.4f}", f"{r['ndcg_at_5']:.4f}", r["n_instances"]])
        return buf.getvalue()


def missing_embeddings(instances, query_embeddings: Mapping, candidate_embeddings: Mapping):
    missing = set()
    for inst in instances:
        if inst.id not in query_embeddings:
            missing.add(inst.id)
        missing.update(c for c in inst.candidate_ids if c not in candidate_embeddings)
    return sorted(missing)


def evaluate(instances, query_embeddings: Mapping, candidate_embeddings: Mapping, k: int = 5) -> EvalReport:
    """Mean Hit@k and NDCG@k (percent) per (task, city).

    Every embedding reference is checked before anything is scored. Sums use
    math.fsum, which is exact, so the result does not depend on instance order.
    """
    instances = list(instances)
    gaps = missing_embeddings(instances, query_embeddings, candidate_embeddings)
    if gaps:
        raise MissingEmbeddings(gaps)
    hits: Dict[Tuple[str, str], List[float]] = {}
    ndcgs: Dict[Tuple[str, str], List[float]] = {}
    for inst in instances:
        r = rank_candidates(
            query_embeddings[inst.id], [candidate_embeddings[c] for c in inst.candidate_ids],
            inst.id, inst.candidate_ids,
        )
        key = (inst.task, inst.city)
        hits.setdefault(key, []).append(float(hit_at_k(r, inst.ground_truth_idx, k)))
        ndcgs.setdefault(key, []).append(ndcg_at_k(r, inst.ground_truth_idx, k))
    rows = {
        key: {
            "hit_at_5": 100.0 * math.fsum(hits[key]) / len(hits[key]),
            "ndcg_at_5": 100.0 * math.fsum(ndcgs[key]) / len(ndcgs[key]),
            "n_instances": len(hits[key]),
        }
        for key in hits
    }
    return EvalReport(rows)


# --- files ----------------------------------------------------------------------------


def load_embeddings(path) -> Dict[str, np.ndarray]:
    """JSONL of {"id", "vector"}; all vectors in a file share one dimension."""
    out, dim = {}, None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                rid, vec = str(rec["id"]), np.asarray(rec["vector"], dtype=np.float64)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: bad embedding record ({exc})") from None
            if vec.ndim != 1 or (dim is not None and len(vec) != dim):
                raise DataError(f"{path}:{lineno}: embedding {rid} has dimension {vec.shape}, expected {dim}")
            if not np.all(np.isfinite(vec)):
                raise DataError(f"{path}:{lineno}: embedding {rid} has non-finite values")
            if rid in out:
                raise DataError(f"{path}:{lineno}: duplicate embedding id {rid}")
            dim = len(vec)
            out[rid] = vec
    return out


def write_embeddings(path, embeddings: Mapping[str, np.ndarray]):
    with open(path, "w", encoding="utf-8") as fh:
        for rid in sorted(embeddings):
            fh.write(json.dumps({"id": rid, "vector": [float(x) for x in embeddings[rid]]}) + "\n")


def load_instances(path) -> List[BenchmarkInstance]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                try:
                    out.append(BenchmarkInstance.from_json(json.loads(line)))
                except json.JSONDecodeError as exc:
                    raise DataError(f"{path}:{lineno}: {exc}") from None
    return out


def write_instances(path, instances):
    with open(path, "w", encoding="utf-8") as fh:
        for inst in instances:
            fh.write(json.dumps(inst.to_json(), ensure_ascii=False, sort_keys=True) + "\n")


# --- perception labels --------------------------------------------------------------------


DEFAULT_PERCEPTION_BINS = ((0.0, 4.0, "Not"), (4.0, 6.0, "Less"), (6.0, 8.0, "Moderately"),
                           (8.0, 9.5, "Very"), (9.5, 10.0, "Extremely"))


@dataclass(frozen=True)
class PerceptionScheme:
    """Half-open bins [lo, hi) covering [0, 10]; the last bin also holds 10."""

    attribute: str
    bins: Tuple[Tuple[float, float, str], ...] = DEFAULT_PERCEPTION_BINS

    def __post_init__(self):
        if self.attribute not in PERCEPTION_ATTRIBUTES:
            raise ConfigError(f"unknown perception attribute {self.attribute!r}")
        bins = tuple((float(lo), float(hi), str(adj)) for lo, hi, adj in self.bins)
        object.__setattr__(self, "bins", bins)
        if not bins or bins[0][0] != 0.0 or bins[-1][1] != 10.0:
            raise ConfigError("perception bins must start at 0 and end at 10")
        for (lo, hi, _), (lo2, _, _) in zip(bins, bins[1:] + ((10.0, None, None),)):
            if not lo < hi or hi != lo2:
                raise ConfigError("perception bins must be contiguous, increasing and non-overlapping")

    @classmethod
    def from_dict(cls, d):
        return cls(d["attribute"], tuple(tuple(b) for b in d.get("bins", DEFAULT_PERCEPTION_BINS)))


def discretize_perception(score: float, scheme: PerceptionScheme) -> str:
    if not (isinstance(score, (int, float)) and math.isfinite(score) and 0.0 <= score <= 10.0):
        raise DataError(f"perception score {score!r} outside [0, 10]")
    adj = next(a for lo, hi, a in scheme.bins if lo <= score < hi or (hi == 10.0 and score == 10.0))
    return f"{adj} {scheme.attribute}, {scheme.attribute.capitalize()} Score: {score:.1f}"


def gen_perception_instance(image_id, score, scheme: PerceptionScheme, city, cfg: BenchConfig,
                            image_ref=None, graph_ref=None) -> BenchmarkInstance:
    """Rank the image's own label among labels for other scores on a 0.5 grid."""
    iid = f"{perception_task(scheme.attribute)}:{city}:{image_id}"
    rng = _rng(cfg.seed, iid)
    truth = discretize_perception(score, scheme)
    grid = [k / 2 for k in range(21) if abs(k / 2 - round(score, 1)) > 1e-9]
    if len(grid) < cfg.candidate_count - 1:
        raise InsufficientEntities(f"{iid}: only {len(grid)} distinct distractor scores")
    others = sorted(rng.sample(grid, cfg.candidate_count - 1))
    distractors = [discretize_perception(s, scheme) for s in others]
    content = f"<image> What is the perception of {scheme.attribute} for this urban location?"
    return _assemble(iid, perception_task(scheme.attribute), city, _user(content), truth, distractors,
                     _text_ids(iid, cfg.candidate_count), rng,
                     images=[image_ref or f"images/{image_id}.jpg"], graphs=[graph_ref] if graph_ref else [])


# --- spatial queries ------------------------------------------------------------------------


def _cache(g: SpatialGraph):
    c = getattr(g, "_bench_cache", None)
    if c is None or c.get("_n") != (len(g.nodes), len(g.edges)):
        c = {"_n": (len(g.nodes), len(g.edges))}
        g._bench_cache = c
    return c


def _kind_table(g: SpatialGraph, kind: NodeKind):
    c = _cache(g)
    if kind not in c:
        nodes = [n for _, n in sorted(g.nodes.items()) if n.kind == kind]
        pts = [n for n in nodes if n.geometry.kind == geo.POINT]
        ext = [n for n in nodes if n.geometry.kind != geo.POINT]
        seg = [n.geometry.segments() for n in ext]
        owner = np.concatenate([np.full(len(s[0]), i) for i, s in enumerate(seg)]) if seg else np.zeros(0, int)
        cat = (lambda k: np.concatenate([s[k] for s in seg]) if seg else np.zeros(0))
        c[kind] = {
            "pts": pts, "plon": np.array([n.anchor.lon for n in pts]), "plat": np.array([n.anchor.lat for n in pts]),
            "ext": ext, "owner": owner, "seg": tuple(cat(k) for k in range(4)),
        }
    return c[kind]


def entity_distance_m(p: GeoPoint, node: GraphNode) -> float:
    """Point distance to the entity: anchor for points, geometry for lines, 0 inside polygons."""
    if node.geometry.kind == geo.POINT:
        return geo.haversine_m(p, node.anchor)
    if geo.point_in_polygon(p, node.geometry):
        return 0.0
    return geo.point_to_geometry_m(p, node.geometry)[0]


def nearest_entities(g: SpatialGraph, p: GeoPoint, kind: NodeKind, named_only=True):
    """All entities of a kind as [(distance, id, node)] sorted by distance then id."""
    t = _kind_table(g, kind)
    out = []
    if t["pts"]:
        d = geo.haversine_np(p.lon, p.lat, t["plon"], t["plat"])
        out += [(float(x), n.id, n) for x, n in zip(d, t["pts"])]
    if t["ext"]:
        d3, _, _ = geo.point_geometry_distances(p.lon, p.lat, *t["seg"])
        seg_d = d3.min(axis=0)
        per = np.full(len(t["ext"]), np.inf)
        np.minimum.at(per, t["owner"], seg_d)
        for x, n in zip(per, t["ext"]):
            if n.geometry.kind == geo.POLYGON and geo.point_in_polygon(p, n.geometry):
                x = 0.0
            out.append((float(x), n.id, n))
    if named_only:
        out = [e for e in out if e[2].name]
    out.sort(key=lambda e: (e[0], e[1]))
    return out


def _distinct_labels(entries):
    seen, out = set(), []
    for e in entries:
        if e[2].label not in seen:
            seen.add(e[2].label)
            out.append(e)
    return out


def _viewpoint(g: SpatialGraph, viewpoint: str) -> GraphNode:
    v = g.node(viewpoint)
    if v.kind != NodeKind.VIEWPOINT or not any(e.kind == EdgeKind.NEAREST for e in g.incident(viewpoint)):
        raise DataError(f"{viewpoint!r} is not an anchored viewpoint")
    return v


def gen_geolocation_label(g: SpatialGraph, viewpoint: str) -> str:
    """'on {road}, near {intersection}, close to {place}, in {area}, {city}' with absent parts left out."""
    v = _viewpoint(g, viewpoint)
    p = v.anchor
    parts = []
    road = nearest_entities(g, p, NodeKind.ROAD)
    if road:
        parts.append(f"on {road[0][2].label}")
    ix = nearest_entities(g, p, NodeKind.INTERSECTION)
    if ix:
        parts.append(f"near {ix[0][2].label}")
    place = sorted(nearest_entities(g, p, NodeKind.POI) + nearest_entities(g, p, NodeKind.AOI),
                   key=lambda e: (e[0], e[1]))
    if place:
        parts.append(f"close to {place[0][2].label}")
    area = nearest_entities(g, p, NodeKind.AOI)
    if area:
        parts.append(f"in {area[0][2].label}")
    city = g.metadata.get("city")
    if city:
        parts.append(str(city))
    return ", ".join(parts)


def gen_geolocation_instance(g: SpatialGraph, viewpoint: str, labels: Mapping[str, str], cfg: BenchConfig,
                             city: str) -> BenchmarkInstance:
    """Candidates are the viewpoint's own label and labels of other viewpoints."""
    iid = f"{GEOLOCATION}:{city}:{viewpoint}"
    rng = _rng(cfg.seed, iid)
    truth = labels[viewpoint]
    pool = sorted({lab for vid, lab in labels.items() if lab != truth})
    if len(pool) < cfg.candidate_count - 1:
        raise InsufficientEntities(f"{iid}: only {len(pool)} distinct other location labels")
    distractors = rng.sample(pool, cfg.candidate_count - 1)
    content = "<image> Where is this street view image taken? Select the correct location:"
    return _assemble(iid, GEOLOCATION, city, _user(content), truth, distractors,
                     _text_ids(iid, cfg.candidate_count), rng, images=[f"images/{viewpoint}.jpg"])


def gen_retrieval_instance(viewpoint: str, destination: str, viewpoints: Sequence[str], cfg: BenchConfig,
                           city: str) -> BenchmarkInstance:
    """Graph plus text query; candidates are images, keyed by their image ids."""
    iid = f"{IMAGE_RETRIEVAL}:{city}:{viewpoint}"
    rng = _rng(cfg.seed, iid)
    others = sorted(v for v in viewpoints if v != viewpoint)
    if len(others) < cfg.candidate_count - 1:
        raise InsufficientEntities(f"{iid}: only {len(others)} other images")
    refs = [f"images/{v}.jpg" for v in (viewpoint, *rng.sample(others, cfg.candidate_count - 1))]
    content = f"<graph> Which street view image references a journey ending at {destination}?"
    # an image candidate is keyed by its file reference, which no text candidate can collide with
    return _assemble(iid, IMAGE_RETRIEVAL, city, _user(content), refs[0], refs[1:], refs, rng,
                     graphs=[f"subgraphs/{viewpoint}.json"])


def _nearest_task(g, v, kind, task, city, cfg):
    iid = f"{task}:{city}:{v.id}"
    entries = _distinct_labels(nearest_entities(g, v.anchor, kind))
    if len(entries) < cfg.candidate_count:
        raise InsufficientEntities(f"{iid}: only {len(entries)} distinct named {kind.value} entities")
    chosen = entries[: cfg.candidate_count]
    what = "street" if kind == NodeKind.ROAD else "point of interest"
    content = f"<image><graph> Which {what} is nearest to where this image was taken?"
    return _assemble(iid, task, city, _user(content), chosen[0][2].label, [e[2].label for e in chosen[1:]],
                     [e[1] for e in chosen], _rng(cfg.seed, iid),
                     images=[f"images/{v.id}.jpg"], graphs=[f"subgraphs/{v.id}.json"])


def _distance_distractors(truth: int, multipliers, n):
    base = max(truth, 1)
    out, used = [], {truth}
    for m in multipliers[:n]:
        x = int(round(base * m))
        while x in used:
            x += 1
        used.add(x)
        out.append(x)
    return out


def _context_nodes(g, v, cfg):
    s = extract_subgraph(g, v.id, cfg.context)
    return [n for n in s.all_nodes() if n.id != v.id]


def _distance_task(g, v, city, cfg):
    iid = f"{DISTANCE}:{city}:{v.id}"
    rng = _rng(cfg.seed, iid)
    pois = [n for n in _context_nodes(g, v, cfg) if n.kind == NodeKind.POI and n.category]
    if not pois:
        raise InsufficientEntities(f"{iid}: no categorised POIs near the viewpoint")
    b = min(pois, key=lambda n: (geo.haversine_m(v.anchor, n.anchor), n.id))
    cats = sorted({n.category for n in pois} - {b.category})
    if not cats:
        raise InsufficientEntities(f"{iid}: only one POI category near the viewpoint")
    cat_a = rng.choice(cats)
    a = min((n for n in pois if n.category == cat_a), key=lambda n: (geo.haversine_m(b.anchor, n.anchor), n.id))
    truth = int(round(geo.haversine_m(a.anchor, b.anchor)))
    distractors = _distance_distractors(truth, cfg.distance_multipliers, cfg.candidate_count - 1)
    content = f"<image><graph>\nHow far is the nearest {cat_a} from the closest {b.category}?"
    return _assemble(iid, DISTANCE, city, _user(content), f"{truth} meters", [f"{x} meters" for x in distractors],
                     _text_ids(iid, cfg.candidate_count), rng,
                     images=[f"images/{v.id}.jpg"], graphs=[f"subgraphs/{v.id}.json"])


def _distance_direction_task(g, v, city, cfg):
    iid = f"{DISTANCE_DIRECTION}:{city}:{v.id}"
    rng = _rng(cfg.seed, iid)
    pool = [n for n in _context_nodes(g, v, cfg) if n.name and n.kind != NodeKind.VIEWPOINT]
    pool = _distinct_labels(sorted(((entity_distance_m(v.anchor, n), n.id, n) for n in pool), key=lambda e: e[:2]))
    targets = [e for e in pool if geo.haversine_m(v.anchor, e[2].anchor) >= 1.0]
    if len(pool) < cfg.candidate_count or not targets:
        raise InsufficientEntities(f"{iid}: only {len(pool)} distinct named entities in the local graph")
    target = rng.choice(targets)[2]
    dist = int(round(geo.haversine_m(v.anchor, target.anchor)))
    cardinal = geo.cardinal8(geo.initial_bearing_deg(v.anchor, target.anchor))
    spot = geo.destination_point(v.anchor, dist, CARDINAL_BEARINGS[cardinal])
    truth = min(pool, key=lambda e: (entity_distance_m(spot, e[2]), e[1]))
    rest = [e for e in pool if e[1] != truth[1]]
    picked = rng.sample(rest, cfg.candidate_count - 1)
    content = (f"<image><graph> If you walk approximately {dist} meters {geo.CARDINAL_WORDS[cardinal]} from here, "
               f"what landmark will you encounter?")
    return _assemble(iid, DISTANCE_DIRECTION, city, _user(content), truth[2].label, [e[2].label for e in picked],
                     [truth[1], *(e[1] for e in picked)], rng,
                     images=[f"images/{v.id}.jpg"], graphs=[f"subgraphs/{v.id}.json"])


def gen_spatial_grounding(g: SpatialGraph, viewpoint: str, task: str, cfg: Optional[BenchConfig] = None,
                          city: Optional[str] = None) -> BenchmarkInstance:
    """One spatial-grounding instance; raises InsufficientEntities when it cannot be filled."""
    cfg = cfg or BenchConfig()
    city = city or str(g.metadata.get("city", "city"))
    v = _viewpoint(g, viewpoint)
    if task == NEAREST_STREET:
        return _nearest_task(g, v, NodeKind.ROAD, task, city, cfg)
    if task == NEAREST_POI:
        return _nearest_task(g, v, NodeKind.POI, task, city, cfg)
    if task == DISTANCE:
        return _distance_task(g, v, city, cfg)
    if task == DISTANCE_DIRECTION:
        return _distance_direction_task(g, v, city, cfg)
    raise ConfigError(f"unknown spatial grounding task {task!r}")
