"""Graph encoder: node and edge encoders, edge-conditioned GATv2 layers, readout.

Everything is plain numpy in float64 with hand-written backward passes. The
forward functions return a cache that the matching backward function consumes.
A small text tower (mean-pooled token table plus a projection) produces the
target embeddings the graph readout is trained against.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Dict, Optional

import numpy as np

from ..errors import ConfigError, ShapeError, UnknownNode
from . import features as F

LN_EPS = 1e-5
TEXT_BLOCKS = ("token_table", "text_proj.W", "text_proj.b")


@dataclass(frozen=True)
class EncoderConfig:
    hidden_dim: int = 128
    pe_dim: int = 64
    edge_dim: int = 64
    token_dim: int = 64
    vocab_size: int = 65_536
    num_layers: int = 2
    num_heads: int = 4
    f_min: float = 1.0 / 10_000
    f_max: float = 1.0
    temperature: float = 0.05
    leaky_slope: float = 0.2

    def __post_init__(self):
        if self.pe_dim % 4 or self.pe_dim <= 0:
            raise ConfigError("pe_dim must be a positive multiple of 4")
        if self.hidden_dim % self.num_heads:
            raise ConfigError("hidden_dim must be divisible by num_heads")
        for name in ("hidden_dim", "edge_dim", "token_dim", "vocab_size", "num_layers", "num_heads"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not (0 < self.f_min <= self.f_max):
            raise ConfigError("need 0 < f_min <= f_max")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")

    @property
    def head_dim(self):
        return self.hidden_dim // self.num_heads

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(**(d or {}))
        except TypeError as exc:
            raise ConfigError(f"bad encoder config: {exc}") from None

    def to_dict(self):
        return asdict(self)


def block_shapes(cfg: EncoderConfig):
    d, shapes = cfg.hidden_dim, {}
    shapes["token_table"] = (cfg.vocab_size, cfg.token_dim)
    shapes["node_proj.W"] = (cfg.token_dim + cfg.pe_dim, d)
    shapes["node_proj.b"] = (d,)
    shapes["edge_mlp.W1"] = (F.RAW_EDGE_DIM, cfg.edge_dim)
    shapes["edge_mlp.b1"] = (cfg.edge_dim,)
    shapes["edge_mlp.W2"] = (cfg.edge_dim, cfg.edge_dim)
    shapes["edge_mlp.b2"] = (cfg.edge_dim,)
    for l in range(cfg.num_layers):
        shapes[f"gat{l}.W_s"] = (d, d)
        shapes[f"gat{l}.W_t"] = (d, d)
        shapes[f"gat{l}.W_e"] = (cfg.edge_dim, d)
        shapes[f"gat{l}.a"] = (d,)
        shapes[f"gat{l}.W_o"] = (d, d)
        shapes[f"gat{l}.ln_gamma"] = (d,)
        shapes[f"gat{l}.ln_beta"] = (d,)
    shapes["readout.W"] = (d, d)
    shapes["readout.b"] = (d,)
    shapes["text_proj.W"] = (cfg.token_dim, d)
    shapes["text_proj.b"] = (d,)
    return shapes


@dataclass
class EncoderParams:
    cfg: EncoderConfig
    blocks: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def init(cls, cfg: EncoderConfig, seed: int = 0) -> "EncoderParams":
        rng = np.random.default_rng(seed)
        blocks = {}
        for name, shape in block_shapes(cfg).items():
            if name == "token_table":
                blocks[name] = rng.standard_normal(shape)
            elif name.endswith("ln_gamma"):
                blocks[name] = np.ones(shape)
            elif name.endswith((".b", ".b1", ".b2", "ln_beta")):
                blocks[name] = np.zeros(shape)
            elif name.endswith(".a"):
                blocks[name] = rng.standard_normal(shape) / np.sqrt(cfg.head_dim)
            else:
                blocks[name] = rng.standard_normal(shape) / np.sqrt(shape[0])
        return cls(cfg, blocks)

    def validate(self):
        shapes = block_shapes(self.cfg)
        if set(shapes) != set(self.blocks):
            raise ShapeError(f"parameter blocks differ from config: {sorted(set(shapes) ^ set(self.blocks))}")
        for name, shape in shapes.items():
            if self.blocks[name].shape != shape:
                raise ShapeError(f"{name}: expected {shape}, got {self.blocks[name].shape}")
        return self

    def copy(self):
        return EncoderParams(self.cfg, {k: v.copy() for k, v in self.blocks.items()})

    def __getitem__(self, name):
        return self.blocks[name]

    def zeros_like(self):
        return {k: np.zeros_like(v) for k, v in self.blocks.items()}


def is_text_block(name: str) -> bool:
    return name in TEXT_BLOCKS


# --- pieces -----------------------------------------------------------------------


def _pool(table, idx, rows, w, n):
    out = np.zeros((n, table.shape[1]))
    if len(idx):
        np.add.at(out, rows, table[idx] * w[:, None])
    return out


def _pool_back(grad_table, d_pooled, idx, rows, w):
    if len(idx):
        np.add.at(grad_table, idx, d_pooled[rows] * w[:, None])


def _layer_norm(x, gamma, beta):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * gamma + beta, (xhat, inv)


def _layer_norm_back(dy, gamma, cache):
    xhat, inv = cache
    dgamma = (dy * xhat).sum(axis=0)
    dbeta = dy.sum(axis=0)
    dxhat = dy * gamma
    dx = inv * (dxhat - dxhat.mean(axis=1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
    return dx, dgamma, dbeta


def node_inputs(params: EncoderParams, g: F.GraphInput):
    pooled = _pool(params["token_table"], g.tok_idx, g.tok_row, g.tok_w, g.n) + g.const
    return np.concatenate([pooled, g.pe], axis=1)


def edge_mlp(params: EncoderParams, raw):
    a1 = np.tanh(raw @ params["edge_mlp.W1"] + params["edge_mlp.b1"])
    return a1 @ params["edge_mlp.W2"] + params["edge_mlp.b2"], a1


def _layer_blocks(params, l):
    return {k.split(".", 1)[1]: v for k, v in params.blocks.items() if k.startswith(f"gat{l}.")}


def gatv2_forward(H, E, recv, send, lp, cfg: EncoderConfig, use_norm=True):
    """One edge-conditioned GATv2 layer over messages send -> recv."""
    n, d = H.shape
    if d != cfg.hidden_dim or E.shape != (len(recv), cfg.edge_dim) or len(recv) != len(send):
        raise ShapeError(f"gatv2 input shapes H={H.shape} E={E.shape} messages={len(recv)}/{len(send)}")
    K, dh = cfg.num_heads, cfg.head_dim
    S = H @ lp["W_s"]
    T = H @ lp["W_t"]
    Ee = E @ lp["W_e"]
    u = S[recv] + T[send] + Ee
    z = np.where(u > 0, u, cfg.leaky_slope * u)
    score = (z * lp["a"]).reshape(-1, K, dh).sum(axis=2)
    m = np.full((n, K), -np.inf)
    np.maximum.at(m, recv, score)
    ex = np.exp(score - m[recv])
    den = np.zeros((n, K))
    np.add.at(den, recv, ex)
    alpha = ex / den[recv]
    msg = np.zeros((n, K, dh))
    np.add.at(msg, recv, alpha[:, :, None] * T[send].reshape(-1, K, dh))
    msg = msg.reshape(n, d)
    pre = H + msg @ lp["W_o"]
    if use_norm:
        out, ln = _layer_norm(pre, lp["ln_gamma"], lp["ln_beta"])
    else:
        out, ln = pre, None
    cache = dict(H=H, E=E, recv=recv, send=send, T=T, u=u, z=z, alpha=alpha, msg=msg, ln=ln)
    return out, cache


def gatv2_backward(dout, cache, lp, cfg: EncoderConfig):
    H, E, recv, send = cache["H"], cache["E"], cache["recv"], cache["send"]
    T, u, z, alpha, msg = cache["T"], cache["u"], cache["z"], cache["alpha"], cache["msg"]
    n, d = H.shape
    K, dh = cfg.num_heads, cfg.head_dim
    grads = {}
    if cache["ln"] is not None:
        dpre, grads["ln_gamma"], grads["ln_beta"] = _layer_norm_back(dout, lp["ln_gamma"], cache["ln"])
    else:
        dpre = dout
        grads["ln_gamma"] = np.zeros(d)
        grads["ln_beta"] = np.zeros(d)
    dH = dpre.copy()
    grads["W_o"] = msg.T @ dpre
    dmsg = (dpre @ lp["W_o"].T).reshape(n, K, dh)

    Ts = T[send].reshape(-1, K, dh)
    dmsg_r = dmsg[recv]
    dalpha = (dmsg_r * Ts).sum(axis=2)
    dT = np.zeros((n, K, dh))
    np.add.at(dT, send, alpha[:, :, None] * dmsg_r)
    dT = dT.reshape(n, d)

    weighted = np.zeros((n, K))
    np.add.at(weighted, recv, alpha * dalpha)
    dscore = alpha * (dalpha - weighted[recv])

    grads["a"] = (dscore[:, :, None] * z.reshape(-1, K, dh)).sum(axis=0).reshape(d)
    dz = (dscore[:, :, None] * lp["a"].reshape(K, dh)).reshape(-1, d)
    du = dz * np.where(u > 0, 1.0, cfg.leaky_slope)
    dS = np.zeros((n, d))
    np.add.at(dS, recv, du)
    np.add.at(dT, send, du)
    grads["W_s"] = H.T @ dS
    grads["W_t"] = H.T @ dT
    grads["W_e"] = E.T @ du
    dH += dS @ lp["W_s"].T + dT @ lp["W_t"].T
    dE = du @ lp["W_e"].T
    return dH, dE, grads


# --- whole-model passes -------------------------------------------------------------


def graph_forward(params: EncoderParams, g: F.GraphInput, use_norm=True):
    """Readout embeddings [n_graphs x d] for a (batched) graph input."""
    cfg = params.cfg
    X = node_inputs(params, g)
    H = X @ params["node_proj.W"] + params["node_proj.b"]
    E, a1 = edge_mlp(params, g.raw)
    layers = []
    for l in range(cfg.num_layers):
        H, c = gatv2_forward(H, E, g.recv, g.send, _layer_blocks(params, l), cfg, use_norm)
        layers.append(c)
    Hc = H[g.centers]
    out = Hc @ params["readout.W"] + params["readout.b"]
    return out, dict(g=g, X=X, a1=a1, E=E, layers=layers, H=H)


def graph_backward(params: EncoderParams, cache, dout, grads):
    """Accumulate parameter gradients of the graph tower into ``grads``."""
    cfg, g = params.cfg, cache["g"]
    H = cache["H"]
    grads["readout.W"] += H[g.centers].T @ dout
    grads["readout.b"] += dout.sum(axis=0)
    dH = np.zeros_like(H)
    np.add.at(dH, g.centers, dout @ params["readout.W"].T)
    dE = np.zeros_like(cache["E"])
    for l in reversed(range(cfg.num_layers)):
        dH, dEl, lg = gatv2_backward(dH, cache["layers"][l], _layer_blocks(params, l), cfg)
        dE += dEl
        for k, v in lg.items():
            grads[f"gat{l}.{k}"] += v
    a1 = cache["a1"]
    grads["edge_mlp.W2"] += a1.T @ dE
    grads["edge_mlp.b2"] += dE.sum(axis=0)
    dz1 = (dE @ params["edge_mlp.W2"].T) * (1.0 - a1 * a1)
    grads["edge_mlp.W1"] += g.raw.T @ dz1
    grads["edge_mlp.b1"] += dz1.sum(axis=0)
    grads["node_proj.W"] += cache["X"].T @ dH
    grads["node_proj.b"] += dH.sum(axis=0)
    dX = dH @ params["node_proj.W"].T
    _pool_back(grads["token_table"], dX[:, : cfg.token_dim], g.tok_idx, g.tok_row, g.tok_w)
    return grads


def text_forward(params: EncoderParams, t: F.TextInput):
    pooled = _pool(params["token_table"], t.tok_idx, t.tok_row, t.tok_w, t.n)
    return pooled @ params["text_proj.W"] + params["text_proj.b"], dict(t=t, pooled=pooled)


def text_backward(params: EncoderParams, cache, dout, grads):
    t = cache["t"]
    grads["text_proj.W"] += cache["pooled"].T @ dout
    grads["text_proj.b"] += dout.sum(axis=0)
    _pool_back(grads["token_table"], dout @ params["text_proj.W"].T, t.tok_idx, t.tok_row, t.tok_w)
    return grads


def kink_signature(caches):
    """Sign pattern of every LeakyReLU input; a change means a kink was crossed."""
    sig = []
    for c in caches:
        for layer in c.get("layers", ()):
            sig.append(layer["u"] > 0)
    return sig


# --- convenience wrappers on subgraphs -------------------------------------------------


def encode_nodes(s, params: EncoderParams, text_vectors=None) -> np.ndarray:
    g = F.subgraph_input(s, params.cfg, text_vectors)
    return node_inputs(params, g) @ params["node_proj.W"] + params["node_proj.b"]


def encode_edges(s, params: EncoderParams) -> np.ndarray:
    """Edge-encoder output for the subgraph's stored edges, in stored direction."""
    g = F.subgraph_input(s, params.cfg)
    return edge_mlp(params, g.raw[: len(g.raw) - g.n : 2])[0]


def gatv2_layer(H, E, adj, params: EncoderParams, layer: int = 0, use_norm=True):
    """Apply layer ``layer`` to node states H; ``adj`` is (recv, send) index arrays."""
    recv, send = (np.asarray(a, dtype=np.int64) for a in adj)
    return gatv2_forward(H, E, recv, send, _layer_blocks(params, layer), params.cfg, use_norm)[0]


def graph_embedding(s, params: EncoderParams, center: Optional[str] = None, text_vectors=None) -> np.ndarray:
    center = center or s.center_ids[0]
    nodes = s.all_nodes()
    if center not in {n.id for n in nodes}:
        raise UnknownNode(f"center {center!r} not in subgraph")
    g = F.prepare_graph(nodes, s.edges, center, params.cfg, text_vectors)
    return graph_forward(params, g)[0][0]


def text_embedding(texts, params: EncoderParams) -> np.ndarray:
    return text_forward(params, F.prepare_texts(list(texts), params.cfg))[0]
