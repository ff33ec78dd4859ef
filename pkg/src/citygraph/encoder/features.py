"""Turning subgraphs and texts into index arrays the encoder can consume.

Node text is hashed into a fixed vocabulary (crc32 of each lowercase
alphanumeric token). Geometry enters twice: as a sinusoidal positional
encoding on the node anchor, and as raw per-edge features.
"""

from __future__ import annotations

import math
import re
import zlib
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from .. import geo
from ..errors import UnknownNode

_TOKEN_SPLIT = re.compile(r"[^0-9a-z]+")
RAW_EDGE_DIM = 5
# Coordinate offsets are expressed in thousandths of a degree (about 111 m of
# latitude) so that neighbouring entities give offsets of order one.
DISPLACEMENT_SCALE = 1000.0


def tokenize(text: str):
    return [t for t in _TOKEN_SPLIT.split(text.lower()) if t]


def token_ids(text: str, vocab_size: int):
    return [zlib.crc32(t.encode("utf-8")) % vocab_size for t in tokenize(text)]


def node_text(node) -> str:
    parts = [node.name or "", node.category or ""]
    for k in sorted(node.attrs):
        parts.append(f"{k} {node.attrs[k]}")
    return " ".join(p for p in parts if p)


def pe_frequencies(cfg):
    k = cfg.pe_dim // 4
    if k == 1:
        return np.array([cfg.f_min])
    return cfg.f_min * (cfg.f_max / cfg.f_min) ** (np.arange(k) / (k - 1))


def spatial_pe(p, cfg) -> np.ndarray:
    """[sin, cos] of 2*pi*f_k*c for c in (lon/180, lat/90), coordinate-major."""
    return spatial_pe_np(np.array([p.lon]), np.array([p.lat]), cfg)[0]


def spatial_pe_np(lon, lat, cfg) -> np.ndarray:
    f = pe_frequencies(cfg)
    out = np.empty((len(lon), cfg.pe_dim))
    for ci, c in enumerate((np.asarray(lon) / 180.0, np.asarray(lat) / 90.0)):
        ang = 2.0 * math.pi * c[:, None] * f[None, :]
        block = out[:, ci * 2 * len(f) : (ci + 1) * 2 * len(f)]
        block[:, 0::2] = np.sin(ang)
        block[:, 1::2] = np.cos(ang)
    return out


def raw_edge_features(distance_m, bearing_deg, a, b) -> np.ndarray:
    """[ln(1+d), sin t, cos t, dlon, dlat] for travel from anchor a to anchor b.

    A zero-length edge has no bearing; it is treated as t = 0.
    """
    theta = 0.0 if distance_m == 0 else math.radians(bearing_deg)
    return np.array([
        math.log1p(distance_m), math.sin(theta), math.cos(theta),
        (b.lon - a.lon) * DISPLACEMENT_SCALE, (b.lat - a.lat) * DISPLACEMENT_SCALE,
    ])


@dataclass
class GraphInput:
    """One or more graphs stored as a single disjoint union.

    Self-loops (zero raw features) are already part of recv/send.
    """

    n: int
    tok_idx: np.ndarray
    tok_row: np.ndarray
    tok_w: np.ndarray
    const: np.ndarray  # externally supplied text vectors; zero rows elsewhere
    pe: np.ndarray
    recv: np.ndarray
    send: np.ndarray
    raw: np.ndarray
    centers: np.ndarray
    node_ids: tuple = ()

    @property
    def n_graphs(self):
        return len(self.centers)


@dataclass
class TextInput:
    n: int
    tok_idx: np.ndarray
    tok_row: np.ndarray
    tok_w: np.ndarray


def _pool_index(seqs):
    idx, rows, w = [], [], []
    for r, ids in enumerate(seqs):
        if ids:
            idx.extend(ids)
            rows.extend([r] * len(ids))
            w.extend([1.0 / len(ids)] * len(ids))
    return np.array(idx, dtype=np.int64), np.array(rows, dtype=np.int64), np.array(w, dtype=np.float64)


def prepare_graph(nodes: Sequence, edges: Sequence, center: str, cfg,
                  text_vectors: Optional[Mapping[str, np.ndarray]] = None) -> GraphInput:
    """Index arrays for a graph given as node and edge lists.

    Every stored edge becomes two messages, one in each direction, and each node
    gets a self-loop. ``text_vectors`` maps node id to a token_dim vector that
    replaces the hashed-token text embedding for that node.
    """
    pos = {n.id: i for i, n in enumerate(nodes)}
    if center not in pos:
        raise UnknownNode(f"center {center!r} is not among the graph nodes")
    text_vectors = text_vectors or {}
    seqs, const = [], np.zeros((len(nodes), cfg.token_dim))
    for i, n in enumerate(nodes):
        if n.id in text_vectors:
            const[i] = np.asarray(text_vectors[n.id], dtype=np.float64)
            seqs.append([])
        else:
            seqs.append(token_ids(node_text(n), cfg.vocab_size))
    idx, rows, w = _pool_index(seqs)
    lon = np.array([n.anchor.lon for n in nodes])
    lat = np.array([n.anchor.lat for n in nodes])
    recv, send, raw = [], [], []
    for e in edges:
        if e.src not in pos or e.dst not in pos:
            continue
        s, t = nodes[pos[e.src]], nodes[pos[e.dst]]
        # message into the destination arrives along the stored direction
        recv += [pos[e.dst], pos[e.src]]
        send += [pos[e.src], pos[e.dst]]
        raw.append(raw_edge_features(e.distance_m, e.bearing_deg, s.anchor, t.anchor))
        raw.append(raw_edge_features(e.distance_m, geo.reverse_bearing(e.bearing_deg), t.anchor, s.anchor))
    for i in range(len(nodes)):
        recv.append(i)
        send.append(i)
        raw.append(np.zeros(RAW_EDGE_DIM))
    return GraphInput(
        n=len(nodes), tok_idx=idx, tok_row=rows, tok_w=w, const=const,
        pe=spatial_pe_np(lon, lat, cfg),
        recv=np.array(recv, dtype=np.int64), send=np.array(send, dtype=np.int64),
        raw=np.array(raw, dtype=np.float64).reshape(-1, RAW_EDGE_DIM),
        centers=np.array([pos[center]], dtype=np.int64),
        node_ids=tuple(n.id for n in nodes),
    )


def subgraph_input(s, cfg, text_vectors=None) -> GraphInput:
    return prepare_graph(s.all_nodes(), s.edges, s.center_ids[0], cfg, text_vectors)


def batch_graphs(graphs: Sequence[GraphInput]) -> GraphInput:
    off = np.cumsum([0] + [g.n for g in graphs])
    cat = np.concatenate
    return GraphInput(
        n=int(off[-1]),
        tok_idx=cat([g.tok_idx for g in graphs]),
        tok_row=cat([g.tok_row + o for g, o in zip(graphs, off)]),
        tok_w=cat([g.tok_w for g in graphs]),
        const=cat([g.const for g in graphs]),
        pe=cat([g.pe for g in graphs]),
        recv=cat([g.recv + o for g, o in zip(graphs, off)]),
        send=cat([g.send + o for g, o in zip(graphs, off)]),
        raw=cat([g.raw for g in graphs]),
        centers=cat([g.centers + o for g, o in zip(graphs, off)]),
        node_ids=sum((g.node_ids for g in graphs), ()),
    )


def prepare_texts(texts: Sequence[str], cfg) -> TextInput:
    idx, rows, w = _pool_index([token_ids(t, cfg.vocab_size) for t in texts])
    return TextInput(len(texts), idx, rows, w)
