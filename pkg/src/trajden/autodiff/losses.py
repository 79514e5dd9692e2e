from __future__ import annotations

import numpy as np

from ..geometry import DomainError
from .tensor import Grid
from .ops import _as_grid


def l1_loss(pred: Grid, target) -> Grid:
    """Mean absolute error; ``target`` is a constant."""
    pred = _as_grid(pred)
    t = np.asarray(target.data if isinstance(target, Grid) else target, dtype=np.float64)
    if t.shape != pred.shape:
        raise DomainError(f"l1_loss: shape mismatch {pred.shape} vs {t.shape}")
    d = pred.data.astype(np.float64) - t
    n = d.size
    out = np.asarray(np.abs(d).sum() / n, dtype=pred.dtype)
    return Grid.from_op(out, (pred,), lambda g: (np.sign(d) * (float(g) / n),))


def bce_with_logits(logit: Grid, label, reduction: str = "mean") -> Grid:
    """Binary cross-entropy on raw logits, stable for any finite logit."""
    logit = _as_grid(logit)
    z = logit.data.astype(np.float64)
    y = np.broadcast_to(np.asarray(label, dtype=np.float64), z.shape)
    per = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    n = per.size if reduction == "mean" else 1
    if reduction not in ("mean", "sum"):
        raise DomainError(f"bce_with_logits: unknown reduction {reduction!r}")
    out = np.asarray(per.sum() / n, dtype=logit.dtype)
    sig = 0.5 * (1.0 + np.tanh(0.5 * z))
    return Grid.from_op(out, (logit,), lambda g: ((sig - y) * (float(g) / n),))


def smoothed_target(n: int, target_index: int, smoothing: float, support=None) -> np.ndarray:
    """(1 - eps) on the target plus eps spread uniformly over ``support`` (default: all classes)."""
    if not 0 <= target_index < n:
        raise DomainError(f"target index {target_index} out of range for {n} classes")
    if not 0.0 <= smoothing < 0.5:
        raise DomainError(f"smoothing must lie in [0, 0.5), got {smoothing}")
    q = np.zeros(n)
    q[target_index] = 1.0 - smoothing
    if smoothing > 0:
        idx = np.arange(n) if support is None else np.asarray(support)
        np.add.at(q, idx, smoothing / len(idx))
    return q


def nll_from_logscores(logscores: Grid, target_index: int, smoothing: float = 0.0, support=None) -> Grid:
    """Label-smoothed negative log-likelihood over the flattened score grid."""
    logscores = _as_grid(logscores)
    s = logscores.data.astype(np.float64).ravel()
    q = smoothed_target(s.size, target_index, smoothing, support)
    m = s.max()
    lse = m + np.log(np.exp(s - m).sum())
    logp = s - lse
    out = np.asarray(-(q * logp).sum(), dtype=logscores.dtype)
    p = np.exp(logp)
    shape = logscores.shape
    return Grid.from_op(out, (logscores,), lambda g: (((p - q) * float(g)).reshape(shape),))
