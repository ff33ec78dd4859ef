"""GeoJSON FeatureCollection ingestion."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import List, Optional

from .errors import DataError, InvalidCoordinate, InvalidGeometry, ParseError
from .graph import GraphNode, NodeKind, geometry_from_geojson

log = logging.getLogger(__name__)

_KIND_ALIASES = {
    "viewpoint": NodeKind.VIEWPOINT,
    "image": NodeKind.VIEWPOINT,
    "mapillary": NodeKind.VIEWPOINT,
    "road": NodeKind.ROAD,
    "street": NodeKind.ROAD,
    "highway": NodeKind.ROAD,
    "intersection": NodeKind.INTERSECTION,
    "poi": NodeKind.POI,
    "aoi": NodeKind.AOI,
    "area": NodeKind.AOI,
    "transitfacility": NodeKind.TRANSIT,
    "transit_facility": NodeKind.TRANSIT,
    "transit": NodeKind.TRANSIT,
}

_CATEGORY_KINDS = {
    "bus_stop": NodeKind.TRANSIT,
    "station": NodeKind.TRANSIT,
    "subway_entrance": NodeKind.TRANSIT,
    "subway": NodeKind.TRANSIT,
    "metro": NodeKind.TRANSIT,
    "tram_stop": NodeKind.TRANSIT,
    "park": NodeKind.AOI,
    "landuse": NodeKind.AOI,
    "neighbourhood": NodeKind.AOI,
    "neighborhood": NodeKind.AOI,
    "district": NodeKind.AOI,
    "primary": NodeKind.ROAD,
    "secondary": NodeKind.ROAD,
    "tertiary": NodeKind.ROAD,
    "residential": NodeKind.ROAD,
    "footway": NodeKind.ROAD,
}

_RESERVED = {"kind", "name", "category", "id"}


@dataclass
class LoadReport:
    accepted: int = 0
    rejected: List[tuple] = field(default_factory=list)  # (feature index, reason)
    unknown_kind: int = 0


def _resolve_kind(props):
    kind = props.get("kind")
    if isinstance(kind, str):
        key = kind.strip().lower().replace(" ", "")
        if key in _KIND_ALIASES:
            return _KIND_ALIASES[key]
    category = props.get("category")
    if isinstance(category, str) and category.strip().lower() in _CATEGORY_KINDS:
        return _CATEGORY_KINDS[category.strip().lower()]
    if props.get("highway"):
        return NodeKind.ROAD
    return None


def load_geojson(source, report: Optional[LoadReport] = None) -> List[GraphNode]:
    """Parse a GeoJSON FeatureCollection into graph nodes.

    ``source`` may be bytes, str, or a binary file object. Features that fail
    geometry validation are skipped and recorded in ``report``; features with
    an unrecognised kind become POIs.
    """
    if report is None:
        report = LoadReport()
    if hasattr(source, "read"):
        source = source.read()
    raw = source.encode("utf-8") if isinstance(source, str) else bytes(source)
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError("GeoJSON is not valid UTF-8", exc.start) from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed GeoJSON: {exc.msg}", len(text[: exc.pos].encode("utf-8"))) from None
    if not isinstance(doc, dict) or doc.get("type") != "FeatureCollection":
        raise DataError("GeoJSON root must be a FeatureCollection")
    features = doc.get("features")
    if not isinstance(features, list):
        raise DataError("FeatureCollection.features must be a list")

    nodes = []
    for idx, feat in enumerate(features):
        if not isinstance(feat, dict):
            report.rejected.append((idx, "feature is not an object"))
            continue
        props = feat.get("properties") or {}
        try:
            geometry = geometry_from_geojson(feat.get("geometry"))
        except (InvalidGeometry, InvalidCoordinate) as exc:
            report.rejected.append((idx, str(exc)))
            continue
        kind = _resolve_kind(props)
        if kind is None:
            report.unknown_kind += 1
            kind = NodeKind.POI
        node_id = props.get("id", feat.get("id"))
        node_id = str(node_id) if node_id is not None else f"f{idx}"
        name = props.get("name")
        category = props.get("category")
        attrs = {str(k): str(v) for k, v in props.items() if k not in _RESERVED and v is not None}
        nodes.append(
            GraphNode(
                id=node_id,
                kind=kind,
                geometry=geometry,
                name=str(name) if name not in (None, "") else None,
                category=str(category) if category not in (None, "") else None,
                attrs=attrs,
            )
        )
        report.accepted += 1
    if report.unknown_kind:
        log.warning("%d features had no recognised kind and were loaded as POIs", report.unknown_kind)
    if report.rejected:
        log.warning("%d features rejected", len(report.rejected))
    return nodes


def nodes_to_geojson(nodes) -> dict:
    """Inverse of load_geojson, used to write fixtures."""
    feats = []
    for n in nodes:
        props = {"id": n.id, "kind": n.kind.value}
        if n.name:
            props["name"] = n.name
        if n.category:
            props["category"] = n.category
        props.update(n.attrs)
        geom = n.to_json()["geometry"]
        feats.append({"type": "Feature", "properties": props, "geometry": geom})
    return {"type": "FeatureCollection", "features": feats}
