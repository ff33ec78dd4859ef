"""Deterministic synthetic cities for tests, demos and benchmarks."""

from __future__ import annotations

import math

import numpy as np

from . import geo
from .geo import GeoPoint, Geometry
from .graph import GraphNode, NodeKind

STREET_WORDS = ["Kallang", "Geylang", "Union", "Queens", "Orchard", "Bencoolen", "Tanjong", "Serangoon",
                "Jalan", "Sims", "Lavender", "Beach", "Victoria", "Rochor", "Bugis", "Hill"]
STREET_TYPES = ["Road", "Street", "Avenue", "Lane", "Drive"]
POI_CATEGORIES = ["cafe", "restaurant", "school", "clinic", "bank", "pharmacy", "library", "museum",
                  "supermarket", "hotel"]
AOI_CATEGORIES = ["park", "residential", "commercial", "district"]
TRANSIT_CATEGORIES = ["bus_stop", "station"]


def _offset(origin: GeoPoint, east_m: float, north_m: float) -> GeoPoint:
    k = geo.METERS_PER_DEGREE
    return GeoPoint(origin.lon + east_m / (k * math.cos(math.radians(origin.lat))), origin.lat + north_m / k)


def synthetic_city(
    n_roads=100,
    n_pois=50,
    n_aois=5,
    n_viewpoints=20,
    n_transit=0,
    seed=0,
    origin=GeoPoint(103.85, 1.30),
    block_m=120.0,
    jitter_m=6.0,
    named_fraction=0.9,
):
    """Grid-like city: half the roads run east-west, half north-south.

    Roads are two- or three-vertex polylines with small jitter, so some
    cross, some only come close, and some end short of the grid line they
    aim at. Points are dropped at random offsets from random roads.
    """
    rng = np.random.default_rng(seed)
    nodes = []
    n_ew = (n_roads + 1) // 2
    n_ns = n_roads - n_ew
    cols = max(n_ns, 1)
    rows = max(n_ew, 1)
    width = cols * block_m
    height = rows * block_m

    def road_name(i):
        return f"{STREET_WORDS[i % len(STREET_WORDS)]} {STREET_TYPES[(i // len(STREET_WORDS)) % len(STREET_TYPES)]} {i // (len(STREET_WORDS) * len(STREET_TYPES)) or ''}".strip()

    roads = []
    for i in range(n_roads):
        ew = i < n_ew
        k = i if ew else i - n_ew
        span = width if ew else height
        start = rng.uniform(-0.05, 0.3) * span
        end = span * rng.uniform(0.7, 1.05)
        line = (k + 0.5) * block_m
        mids = sorted(rng.uniform(start, end, size=int(rng.integers(0, 2))))
        along = [start, *mids, end]
        pts = []
        for a in along:
            off = line + rng.normal(0, jitter_m)
            pts.append(_offset(origin, a, off) if ew else _offset(origin, off, a))
        g = Geometry(geo.LINESTRING, tuple(pts))
        name = road_name(i) if rng.random() < named_fraction else None
        roads.append(g)
        nodes.append(GraphNode(id=f"road{i:04d}", kind=NodeKind.ROAD, geometry=g, name=name,
                               category="residential"))

    def near_road(max_off):
        r = roads[int(rng.integers(len(roads)))]
        seg = int(rng.integers(len(r.points) - 1))
        a, b = r.points[seg], r.points[seg + 1]
        t = rng.random()
        base = GeoPoint(a.lon + t * (b.lon - a.lon), a.lat + t * (b.lat - a.lat))
        return _offset(base, rng.uniform(-max_off, max_off), rng.uniform(-max_off, max_off))

    for i in range(n_pois):
        p = near_road(70.0)
        cat = POI_CATEGORIES[int(rng.integers(len(POI_CATEGORIES)))]
        name = f"{cat.title()} {i}" if rng.random() < named_fraction else None
        nodes.append(GraphNode(id=f"poi{i:04d}", kind=NodeKind.POI, geometry=Geometry(geo.POINT, (p,)),
                               name=name, category=cat, attrs={"street": "synthetic"} if i % 3 == 0 else {}))
    for i in range(n_transit):
        p = near_road(30.0)
        cat = TRANSIT_CATEGORIES[i % 2]
        nodes.append(GraphNode(id=f"transit{i:04d}", kind=NodeKind.TRANSIT, geometry=Geometry(geo.POINT, (p,)),
                               name=f"Stop {i}", category=cat))
    for i in range(n_aois):
        c = _offset(origin, rng.uniform(0.1, 0.9) * width, rng.uniform(0.1, 0.9) * height)
        w, h = rng.uniform(40, 200), rng.uniform(40, 200)
        ring = [_offset(c, -w, -h), _offset(c, w, -h), _offset(c, w, h), _offset(c, -w, h)]
        ring.append(ring[0])
        cat = AOI_CATEGORIES[i % len(AOI_CATEGORIES)]
        nodes.append(GraphNode(id=f"aoi{i:04d}", kind=NodeKind.AOI, geometry=Geometry(geo.POLYGON, tuple(ring)),
                               name=f"{cat.title()} Area {i}", category=cat, attrs={"planning area": f"Zone {i % 3}"}))
    for i in range(n_viewpoints):
        p = near_road(25.0)
        nodes.append(GraphNode(id=f"img{i:04d}", kind=NodeKind.VIEWPOINT, geometry=Geometry(geo.POINT, (p,)),
                               category="viewpoint"))
    return nodes


def image_points(n, seed=0, **city_kwargs):
    """(image id, GeoPoint) pairs dropped near the roads of synthetic_city(seed=seed)."""
    city = synthetic_city(n_viewpoints=n, seed=seed, **city_kwargs)
    return [(f"image{i:04d}", node.anchor) for i, node in enumerate(n for n in city if n.kind == NodeKind.VIEWPOINT)]


def tiled_city(grid=160, piece_blocks=4, n_pois=400_000, n_viewpoints=50_000, seed=0,
               origin=GeoPoint(-73.95, 40.70), block_m=120.0, jitter_m=3.0):
    """Large city for throughput tests: a grid of short road pieces plus scattered points.

    Every grid line is cut into pieces of piece_blocks blocks, so the number of
    road crossings grows with the area rather than with the square of the road
    count. Points are generated in bulk with numpy.
    """
    rng = np.random.default_rng(seed)
    k = geo.METERS_PER_DEGREE
    coslat = math.cos(math.radians(origin.lat))

    def to_lonlat(east, north):
        return origin.lon + east / (k * coslat), origin.lat + north / k

    nodes = []
    rid = 0
    for horizontal in (True, False):
        for line in range(grid):
            shift = int(rng.integers(piece_blocks))
            start = -shift
            while start < grid:
                a0, a1 = max(start, 0), min(start + piece_blocks, grid)
                if a1 > a0:
                    ts = np.array([a0 - 0.1, (a0 + a1) / 2, a1 + 0.1]) * block_m
                    off = (line + 0.5) * block_m + rng.normal(0, jitter_m, 3)
                    east, north = (ts, off) if horizontal else (off, ts)
                    lon, lat = to_lonlat(east, north)
                    g = Geometry(geo.LINESTRING, tuple(GeoPoint(float(x), float(y)) for x, y in zip(lon, lat)))
                    nodes.append(GraphNode(id=f"r{rid:06d}", kind=NodeKind.ROAD, geometry=g,
                                           name=f"{'Street' if horizontal else 'Avenue'} {line} part {a0}"))
                    rid += 1
                start += piece_blocks
    span = grid * block_m
    for prefix, kind, count in (("p", NodeKind.POI, n_pois), ("v", NodeKind.VIEWPOINT, n_viewpoints)):
        lon, lat = to_lonlat(rng.uniform(0, span, count), rng.uniform(0, span, count))
        for i in range(count):
            pt = GeoPoint(float(lon[i]), float(lat[i]))
            nodes.append(GraphNode(id=f"{prefix}{i:07d}", kind=kind, geometry=Geometry(geo.POINT, (pt,)),
                                   name=f"Place {i}" if kind == NodeKind.POI else None,
                                   category="shop" if kind == NodeKind.POI else "viewpoint"))
    return nodes


KALLANG_IMAGE_ID = "539125490832143"
KALLANG_ORIGIN = GeoPoint(103.8693, 1.3100)


def kallang_fixture():
    """A few Singapore entities laid out so the image sits 2.0 m from Kallang Road at 342 degrees.

    Returns (nodes, image id, image point). Kallang Road runs along bearing
    72/252 through the image's foot point, so the perpendicular from the image
    points to 342. Geylang Road crosses it 3.2 m further east and heads
    south-west toward a park and a landmark.
    """
    img = KALLANG_ORIGIN
    foot = geo.destination_point(img, 2.0, 342.0)
    cross = geo.destination_point(foot, 3.2, 72.0)
    kallang = Geometry(geo.LINESTRING, (geo.destination_point(foot, 150.0, 252.0), geo.destination_point(foot, 300.0, 72.0)))
    # Geylang Road leaves the crossing heading south-east before bending south-west,
    # so it never comes closer to the image than Kallang Road does
    bend = geo.destination_point(cross, 40.0, 150.0)
    geylang_end = geo.destination_point(cross, 600.0, 206.0)
    geylang = Geometry(geo.LINESTRING, (geo.destination_point(cross, 60.0, 26.0), cross, bend, geylang_end))
    park_center = geo.destination_point(cross, 375.8, 206.0)
    park = geo.destination_point(park_center, 30.0, 296.0)
    bugis_c = geo.destination_point(park_center, 120.0, 263.0)
    ring = [_offset(bugis_c, dx, dy) for dx, dy in ((-60, -60), (60, -60), (60, 60), (-60, 60), (-60, -60))]
    banyan = geo.destination_point(geylang_end, 28.4, 114.0)
    nodes = [
        GraphNode(id="kallang_rd", kind=NodeKind.ROAD, geometry=kallang, name="Kallang Road", category="primary"),
        GraphNode(id="geylang_rd", kind=NodeKind.ROAD, geometry=geylang, name="Geylang Road", category="primary"),
        GraphNode(id="park_north", kind=NodeKind.POI, geometry=Geometry(geo.POINT, (park,)),
                  name="Kallang Riverside Park North", category="park"),
        GraphNode(id="kampong_bugis", kind=NodeKind.AOI, geometry=Geometry(geo.POLYGON, tuple(ring)),
                  name="Kampong Bugis", category="neighbourhood", attrs={"planning area": "Kallang"}),
        GraphNode(id="banyan", kind=NodeKind.POI, geometry=Geometry(geo.POINT, (banyan,)),
                  name="Banyan Tree & Ruin", category="attraction"),
    ]
    return nodes, KALLANG_IMAGE_ID, img


def write_fixture_city(directory, seed=0, n_roads=100, n_pois=50, n_aois=5, n_images=20, city="Fixture City"):
    """Write city.geojson, images.csv, perception.csv and config.yaml for a synthetic city.

    Viewpoints go to the image manifest rather than the GeoJSON, as they
    would for a real image collection. Returns the config path.
    """
    import csv
    import json
    from pathlib import Path

    import yaml

    from .ingest import nodes_to_geojson

    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    nodes = synthetic_city(n_roads=n_roads, n_pois=n_pois, n_aois=n_aois, n_viewpoints=n_images, seed=seed)
    features = [n for n in nodes if n.kind != NodeKind.VIEWPOINT]
    views = [n for n in nodes if n.kind == NodeKind.VIEWPOINT]
    (out / "city.geojson").write_text(json.dumps(nodes_to_geojson(features), sort_keys=True) + "\n", encoding="utf-8")
    rng = np.random.default_rng(seed + 1)
    with open(out / "images.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "lon", "lat"])
        for n in views:
            w.writerow([n.id, repr(float(n.anchor.lon)), repr(float(n.anchor.lat))])
    with open(out / "perception.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image_id", "attribute", "score"])
        for n in views:
            w.writerow([n.id, "depressing", f"{round(float(rng.uniform(0, 10)) * 2) / 2:.1f}"])
    cfg = {"city": city, "inputs": ["city.geojson"], "images": "images.csv", "perception": "perception.csv",
           "out": "build", "seed": seed,
           "bench": {"candidate_count": 10, "context": {"radius_m": 400.0, "max_nearby": 40, "max_onehop": 40}}}
    path = out / "config.yaml"
    path.write_text(yaml.safe_dump(cfg, sort_keys=False), encoding="utf-8")
    return path
