"""Contrastive training loop, Adam with per-block learning rates, gradient checking."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from ..errors import ConfigError, NumericError, ShapeError
from . import features as F
from .loss import infonce
from .model import (
    EncoderConfig,
    EncoderParams,
    graph_backward,
    graph_forward,
    is_text_block,
    kink_signature,
    text_backward,
    text_forward,
)


@dataclass
class ContrastiveBatch:
    """Row i of ``queries`` is paired with row i of ``targets``; other rows are negatives.

    Queries are texts (stage 1, standing in for the image side) or graphs given
    as Subgraph or GraphInput objects (stage 2). Targets are always texts.
    """

    queries: Sequence
    targets: Sequence[str]
    _prepared: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if len(self.queries) != len(self.targets):
            raise ShapeError(f"{len(self.queries)} queries but {len(self.targets)} targets")
        if len(self.targets) < 2:
            raise ShapeError("a contrastive batch needs at least 2 pairs")

    @property
    def graph_queries(self):
        return not isinstance(self.queries[0], str)

    def prepare(self, cfg: EncoderConfig):
        key = (cfg.vocab_size, cfg.token_dim, cfg.pe_dim, cfg.f_min, cfg.f_max)
        if key not in self._prepared:
            if self.graph_queries:
                gs = [q if isinstance(q, F.GraphInput) else F.subgraph_input(q, cfg) for q in self.queries]
                q = F.batch_graphs(gs)
            else:
                q = F.prepare_texts(list(self.queries), cfg)
            self._prepared[key] = (q, F.prepare_texts(list(self.targets), cfg))
        return self._prepared[key]


def embed_batch(params: EncoderParams, batch: ContrastiveBatch, use_norm=True):
    q_in, t_in = batch.prepare(params.cfg)
    if batch.graph_queries:
        Q, qc = graph_forward(params, q_in, use_norm)
    else:
        Q, qc = text_forward(params, q_in)
    T, tc = text_forward(params, t_in)
    return Q, T, (qc, tc)


def _objective(params, objective):
    """``objective(Q, T) -> (loss, dL/dQ, dL/dT)``; InfoNCE at the configured temperature by default."""
    if objective is None:
        return lambda Q, T: infonce(Q, T, params.cfg.temperature)
    return objective


def batch_loss(params: EncoderParams, batch: ContrastiveBatch, use_norm=True, objective=None) -> float:
    Q, T, _ = embed_batch(params, batch, use_norm)
    return _objective(params, objective)(Q, T)[0]


def loss_and_grad(params: EncoderParams, batch: ContrastiveBatch, use_norm=True, objective=None):
    Q, T, (qc, tc) = embed_batch(params, batch, use_norm)
    loss, dQ, dT = _objective(params, objective)(Q, T)
    grads = params.zeros_like()
    if batch.graph_queries:
        graph_backward(params, qc, dQ, grads)
    else:
        text_backward(params, qc, dQ, grads)
    text_backward(params, tc, dT, grads)
    return loss, grads, (qc, tc)


# --- optimizer --------------------------------------------------------------------


class Adam:
    """Adam with a fixed learning rate per parameter block.

    Every step records the learning rate applied to each block in ``applied``
    so callers can audit rate ratios after the fact. Token-table rows that have
    never received a gradient have zero moments and therefore a zero update;
    they are skipped, which changes nothing numerically.
    """

    SPARSE_BLOCKS = ("token_table",)

    def __init__(self, params: EncoderParams, lrs: Dict[str, float], beta1=0.9, beta2=0.999, eps=1e-8):
        missing = set(params.blocks) - set(lrs)
        if missing:
            raise ConfigError(f"no learning rate for blocks {sorted(missing)}")
        self.params, self.lrs = params, dict(lrs)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = params.zeros_like()
        self.v = params.zeros_like()
        self.t = 0
        self.applied: List[Dict[str, float]] = []
        self._active = {k: np.zeros(params.blocks[k].shape[0], dtype=bool) for k in self.SPARSE_BLOCKS}

    def _update(self, p, g, m, v, lr, c1, c2):
        m *= self.beta1
        m += (1.0 - self.beta1) * g
        v *= self.beta2
        v += (1.0 - self.beta2) * g * g
        if lr:
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def step(self, grads):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        record = {}
        for name, p in self.params.blocks.items():
            lr = self.lrs[name]
            if name in self._active:
                active = self._active[name]
                active |= np.any(grads[name] != 0, axis=1)
                rows = np.flatnonzero(active)
                m, v, pr = self.m[name][rows], self.v[name][rows], p[rows]
                self._update(pr, grads[name][rows], m, v, lr, c1, c2)
                self.m[name][rows], self.v[name][rows], p[rows] = m, v, pr
            else:
                self._update(p, grads[name], self.m[name], self.v[name], lr, c1, c2)
            record[name] = lr
        self.applied.append(record)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 200
    lr_graph: float = 5e-5
    lr_text: float = 5e-6
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.lr_graph < 0 or self.lr_text < 0:
            raise ConfigError("learning rates must be non-negative")

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(**(d or {}))
        except TypeError as exc:
            raise ConfigError(f"bad training config: {exc}") from None


def stage_learning_rates(params: EncoderParams, stage: int, tcfg: TrainConfig):
    """Stage 2 splits graph-side and text-side rates; stage 1 has one rate for all."""
    if stage == 1:
        return {k: tcfg.lr_graph for k in params.blocks}
    if stage == 2:
        return {k: (tcfg.lr_text if is_text_block(k) else tcfg.lr_graph) for k in params.blocks}
    raise ConfigError(f"stage must be 1 or 2, got {stage}")


@dataclass
class TrainResult:
    params: EncoderParams
    history: List[float]
    optimizer: Adam

    def __iter__(self):
        return iter((self.params, self.history))


def train_toy(dataset: Sequence[ContrastiveBatch], cfg: EncoderConfig, stage: int,
              tcfg: Optional[TrainConfig] = None, params: Optional[EncoderParams] = None) -> TrainResult:
    """Train for ``tcfg.steps`` steps, cycling through batches in a seeded order.

    ``history[i]`` is the loss measured before the i-th update.
    """
    tcfg = tcfg or TrainConfig()
    if not dataset:
        raise ConfigError("training needs at least one batch")
    params = params.copy() if params is not None else EncoderParams.init(cfg, tcfg.seed)
    opt = Adam(params, stage_learning_rates(params, stage, tcfg))
    rng = np.random.default_rng(tcfg.seed)
    order: List[int] = []
    history = []
    for step in range(tcfg.steps):
        if not order:
            order = list(rng.permutation(len(dataset)))
        batch = dataset[order.pop(0)]
        loss, grads, _ = loss_and_grad(params, batch)
        if not math.isfinite(loss):
            raise NumericError(f"loss became {loss} at step {step}; training aborted")
        bad = sorted(k for k, g in grads.items() if not np.all(np.isfinite(g)))
        if bad:
            raise NumericError(f"non-finite gradients at step {step} in blocks {bad}; training aborted")
        history.append(loss)
        opt.step(grads)
    return TrainResult(params, history, opt)


def write_training_log(path, result: TrainResult):
    """CSV with one row per step: step, loss, then the learning rate of every block."""
    names = list(result.params.blocks)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss", *(f"lr:{n}" for n in names)])
        for i, (loss, lrs) in enumerate(zip(result.history, result.optimizer.applied)):
            w.writerow([i, repr(loss), *(repr(lrs[n]) for n in names)])


def retrieval_hit_at_1(params: EncoderParams, batch: ContrastiveBatch) -> float:
    Q, T, _ = embed_batch(params, batch)
    Qn = Q / np.linalg.norm(Q, axis=1, keepdims=True)
    Tn = T / np.linalg.norm(T, axis=1, keepdims=True)
    return float(np.mean(np.argmax(Qn @ Tn.T, axis=1) == np.arange(len(Q))))


# --- gradient check -----------------------------------------------------------------


@dataclass
class GradCheckReport:
    sampled_params: int
    max_rel_error: float
    per_block: Dict[str, float]
    samples_per_block: Dict[str, int]
    resampled: int = 0
    below_resolution: int = 0
    worst: tuple = ()  # (block, index, analytic, numerical)

    @property
    def ok(self):
        return self.max_rel_error < 1e-4


def _candidate_indices(name, arr, batch_inputs, rng, k):
    if name == "token_table":
        used = np.unique(np.concatenate([x.tok_idx for x in batch_inputs]))
        if len(used):
            rows = rng.choice(used, size=k)
            cols = rng.integers(0, arr.shape[1], size=k)
            return [(int(r), int(c)) for r, c in zip(rows, cols)]
    flat = rng.integers(0, arr.size, size=k)
    return [np.unravel_index(int(f), arr.shape) for f in flat]


def grad_check(params: EncoderParams, batch: ContrastiveBatch, eps: float = 1e-4, n_samples: int = 120,
               seed: int = 0, use_norm: bool = True, max_resample: int = 10,
               resolution: float = 1e-6, objective=None) -> GradCheckReport:
    """Compare analytic gradients with central differences on sampled scalars.

    Samples are spread evenly over every block. A sample whose perturbation
    flips the sign of any LeakyReLU input is discarded and redrawn. So is a
    sample where both gradients are below ``resolution``. Rounding in the
    float64 forward pass leaves about 1e-12 of noise in the difference
    quotient at eps=1e-4, so a 1e-4 relative check is meaningless for
    gradients much smaller than 1e-6 (many entries are exactly zero, e.g.
    attention inputs that shift every logit of a softmax equally).
    """
    params = params.copy()
    rng = np.random.default_rng(seed)
    objective = _objective(params, objective)
    _, grads, caches = loss_and_grad(params, batch, use_norm, objective)
    base_sig = kink_signature(caches)
    q_in, t_in = batch.prepare(params.cfg)
    names = list(params.blocks)
    per_block_n = max(1, math.ceil(n_samples / len(names)))
    per_block, counts, resampled, flat = {}, {}, 0, 0
    worst, worst_err = (), -1.0

    def probe(name, idx):
        arr = params.blocks[name]
        old = arr[idx]
        vals, sigs = [], []
        for delta in (eps, -eps):
            arr[idx] = old + delta
            Q, T, cs = embed_batch(params, batch, use_norm)
            vals.append(objective(Q, T)[0])
            sigs.append(kink_signature(cs))
        arr[idx] = old
        crossed = any(not np.array_equal(a, b) for s in sigs for a, b in zip(s, base_sig))
        return (vals[0] - vals[1]) / (2 * eps), crossed

    for name in names:
        errs = []
        pending = _candidate_indices(name, params.blocks[name], [q_in, t_in], rng, per_block_n)
        tries = 0
        while pending:
            idx = pending.pop()
            num, crossed = probe(name, idx)
            ana = float(grads[name][idx])
            is_flat = max(abs(ana), abs(num)) < resolution
            if crossed or is_flat:
                resampled += crossed
                flat += is_flat
                tries += 1
                if tries <= max_resample * per_block_n:
                    pending.extend(_candidate_indices(name, params.blocks[name], [q_in, t_in], rng, 1))
                continue
            errs.append(abs(ana - num) / max(abs(ana), abs(num), 1e-8))
            if errs[-1] > worst_err:
                worst, worst_err = (name, tuple(int(i) for i in idx), ana, num), errs[-1]
        per_block[name] = max(errs, default=0.0)
        counts[name] = len(errs)
    return GradCheckReport(sum(counts.values()), max(per_block.values()), per_block, counts, resampled, flat, worst)
