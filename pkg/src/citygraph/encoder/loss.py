"""InfoNCE over in-batch negatives with temperature-scaled cosine similarity."""

import numpy as np

from ..errors import NumericError, ShapeError


def _normalize(X, what):
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    bad = np.flatnonzero(~(norms[:, 0] > 0))
    if len(bad):
        raise NumericError(f"{what} embedding {int(bad[0])} has zero or non-finite norm")
    return X / norms, norms


def infonce(Q, T, temperature):
    """Return (loss, dL/dQ, dL/dT) for queries Q and targets T paired by row."""
    Q = np.asarray(Q, dtype=np.float64)
    T = np.asarray(T, dtype=np.float64)
    if Q.ndim != 2 or Q.shape != T.shape:
        raise ShapeError(f"query/target shapes differ: {Q.shape} vs {T.shape}")
    B = Q.shape[0]
    if B < 2:
        raise ShapeError("InfoNCE needs at least 2 pairs for in-batch negatives")
    qn, qnorm = _normalize(Q, "query")
    tn, tnorm = _normalize(T, "target")
    S = (qn @ tn.T) / temperature
    m = S.max(axis=1, keepdims=True)
    ex = np.exp(S - m)
    Z = ex.sum(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(Z[:, 0])
    loss = float(np.mean(lse - np.diag(S)))
    dS = ex / Z
    dS[np.arange(B), np.arange(B)] -= 1.0
    dS /= B * temperature
    dqn = dS @ tn
    dtn = dS.T @ qn
    dQ = (dqn - qn * (qn * dqn).sum(axis=1, keepdims=True)) / qnorm
    dT = (dtn - tn * (tn * dtn).sum(axis=1, keepdims=True)) / tnorm
    return loss, dQ, dT


def infonce_loss(Q, T, temperature) -> float:
    return infonce(Q, T, temperature)[0]
