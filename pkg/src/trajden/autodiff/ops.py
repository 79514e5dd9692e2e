"""Differentiable operations on :class:`Grid`.

Every op checks shapes eagerly and raises :class:`DomainError` naming the
offending shapes. Reductions accumulate in float64 and cast back.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from ..geometry import DomainError
from .tensor import Grid

LN_EPS = 1e-5


def _as_grid(x) -> Grid:
    return x if isinstance(x, Grid) else Grid(x)


def _same_shape(a: Grid, b: Grid, op: str) -> None:
    if a.shape != b.shape:
        raise DomainError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Grid, b: Grid) -> Grid:
    a, b = _as_grid(a), _as_grid(b)
    _same_shape(a, b, "add")
    return Grid.from_op(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Grid, b: Grid) -> Grid:
    a, b = _as_grid(a), _as_grid(b)
    _same_shape(a, b, "sub")
    return Grid.from_op(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Grid, b: Grid) -> Grid:
    a, b = _as_grid(a), _as_grid(b)
    _same_shape(a, b, "mul")
    return Grid.from_op(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Grid, c: float) -> Grid:
    a = _as_grid(a)
    return Grid.from_op(a.data * a.data.dtype.type(c), (a,), lambda g: (g * c,))


def reshape(a: Grid, shape) -> Grid:
    a = _as_grid(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DomainError(f"reshape: cannot view {src} as {shape}") from exc
    return Grid.from_op(out, (a,), lambda g: (g.reshape(src),))


def take(a: Grid, index, axis: int = 0) -> Grid:
    """Select a single index (or slice) along ``axis``."""
    a = _as_grid(a)
    sl = [slice(None)] * a.data.ndim
    sl[axis] = index
    sl = tuple(sl)

    def bw(g):
        full = np.zeros_like(a.data)
        full[sl] = g
        return (full,)

    return Grid.from_op(a.data[sl], (a,), bw)


def sum_all(a: Grid) -> Grid:
    a = _as_grid(a)
    out = np.asarray(np.sum(a.data, dtype=np.float64), dtype=a.dtype)
    return Grid.from_op(out, (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean_all(a: Grid) -> Grid:
    a = _as_grid(a)
    n = a.data.size
    out = np.asarray(np.sum(a.data, dtype=np.float64) / n, dtype=a.dtype)
    return Grid.from_op(out, (a,), lambda g: (np.broadcast_to(g / n, a.shape).copy(),))


def linear(x: Grid, W: Grid, b: Grid | None = None) -> Grid:
    """``x @ W.T + b`` for ``x`` of shape (in,) or (N, in) and ``W`` of shape (out, in)."""
    x, W = _as_grid(x), _as_grid(W)
    if W.data.ndim != 2 or x.shape[-1] != W.shape[1] or x.data.ndim not in (1, 2):
        raise DomainError(f"linear: input {x.shape} incompatible with weight {W.shape}")
    if b is not None:
        b = _as_grid(b)
        if b.shape != (W.shape[0],):
            raise DomainError(f"linear: bias {b.shape} incompatible with weight {W.shape}")
    out = x.data @ W.data.T
    if b is not None:
        out = out + b.data

    def bw(g):
        gx = g @ W.data
        if x.data.ndim == 1:
            gW = np.outer(g, x.data)
            gb = g
        else:
            gW = g.T @ x.data
            gb = g.sum(axis=0)
        return (gx, gW, gb) if b is not None else (gx, gW)

    parents = (x, W, b) if b is not None else (x, W)
    return Grid.from_op(out, parents, bw)


def relu(x: Grid) -> Grid:
    x = _as_grid(x)
    mask = x.data > 0
    return Grid.from_op(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def layer_norm(x: Grid, axis: int = -1) -> Grid:
    """Zero-mean, unit-variance normalization along ``axis`` (no affine)."""
    x = _as_grid(x)
    xd = x.data.astype(np.float64)
    mu = xd.mean(axis=axis, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    y = xc * inv

    def bw(g):
        g = g.astype(np.float64)
        gm = g.mean(axis=axis, keepdims=True)
        gy = (g * y).mean(axis=axis, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return Grid.from_op(y.astype(x.dtype), (x,), bw)


def softmax(x: Grid, axis: int = -1) -> Grid:
    x = _as_grid(x)
    xd = x.data.astype(np.float64)
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    p = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        g = g.astype(np.float64)
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return Grid.from_op(p.astype(x.dtype), (x,), bw)


def log_softmax(x: Grid, axis: int = -1) -> Grid:
    x = _as_grid(x)
    xd = x.data.astype(np.float64)
    m = xd.max(axis=axis, keepdims=True)
    lse = m + np.log(np.exp(xd - m).sum(axis=axis, keepdims=True))
    out = xd - lse
    p = np.exp(out)

    def bw(g):
        g = g.astype(np.float64)
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return Grid.from_op(out.astype(x.dtype), (x,), bw)


def concat(xs, axis: int = 0) -> Grid:
    xs = [_as_grid(x) for x in xs]
    if not xs:
        raise DomainError("concat: empty input list")
    ref = list(xs[0].shape)
    for x in xs[1:]:
        other = list(x.shape)
        if len(other) != len(ref) or any(o != r for i, (o, r) in enumerate(zip(other, ref)) if i != axis % len(ref)):
            raise DomainError(f"concat: shape mismatch {tuple(ref)} vs {x.shape} along axis {axis}")
    sizes = [x.shape[axis] for x in xs]
    cuts = np.cumsum(sizes)[:-1]
    out = np.concatenate([x.data for x in xs], axis=axis)
    return Grid.from_op(out, tuple(xs), lambda g: tuple(np.split(g, cuts, axis=axis)))


def mean_pool(x: Grid) -> Grid:
    """Global spatial average: (C, H, W) -> (C,)."""
    x = _as_grid(x)
    if x.data.ndim != 3:
        raise DomainError(f"mean_pool expects (C, H, W), got {x.shape}")
    C, H, W = x.shape
    out = (x.data.reshape(C, -1).sum(axis=1, dtype=np.float64) / (H * W)).astype(x.dtype)
    return Grid.from_op(out, (x,), lambda g: (np.broadcast_to((g / (H * W))[:, None, None], x.shape).copy(),))


def avg_pool(x: Grid, k: int) -> Grid:
    """Non-overlapping k x k average pooling on (C, H, W)."""
    x = _as_grid(x)
    C, H, W = x.shape
    if H % k or W % k:
        raise DomainError(f"avg_pool: {x.shape} not divisible by {k}")
    out = x.data.reshape(C, H // k, k, W // k, k).mean(axis=(2, 4), dtype=np.float64).astype(x.dtype)

    def bw(g):
        up = np.repeat(np.repeat(g, k, axis=1), k, axis=2) / (k * k)
        return (up,)

    return Grid.from_op(out, (x,), bw)


def mul_const(x: Grid, c: np.ndarray) -> Grid:
    """Elementwise product with a constant array of the same shape."""
    x = _as_grid(x)
    c = np.asarray(c, dtype=x.dtype)
    if c.shape != x.shape:
        raise DomainError(f"mul_const: shape mismatch {x.shape} vs {c.shape}")
    return Grid.from_op(x.data * c, (x,), lambda g: (g * c,))


def sparse_map(x: Grid, M: sp.spmatrix, out_spatial=None) -> Grid:
    """Apply a fixed sparse linear map to every channel: (C, *S_in) -> (C, *S_out)."""
    x = _as_grid(x)
    C = x.shape[0]
    flat = x.data.reshape(C, -1)
    if flat.shape[1] != M.shape[1]:
        raise DomainError(f"sparse_map: input {x.shape} incompatible with map {M.shape}")
    out = np.asarray((M @ flat.T.astype(np.float64)).T, dtype=x.dtype)
    if out_spatial is not None:
        out = out.reshape((C,) + tuple(out_spatial))
    MT = M.T.tocsr()

    def bw(g):
        gf = g.reshape(C, -1).astype(np.float64)
        return (np.asarray((MT @ gf.T).T).reshape(x.shape),)

    return Grid.from_op(out, (x,), bw)


def _im2col(xp: np.ndarray, stride: int, Ho: int, Wo: int) -> np.ndarray:
    # xp: (C, H+2, W+2) -> (Ho*Wo, C*9)
    C = xp.shape[0]
    cols = np.empty((C, 3, 3, Ho, Wo), dtype=xp.dtype)
    for di in range(3):
        for dj in range(3):
            cols[:, di, dj] = xp[:, di : di + stride * Ho : stride, dj : dj + stride * Wo : stride]
    return cols.reshape(C * 9, Ho * Wo).T


def conv2d_3x3(x: Grid, K: Grid, b: Grid | None = None, stride: int = 1) -> Grid:
    """3x3 convolution with zero padding 1 on a single (C, H, W) grid; K is (O, C, 3, 3)."""
    x, K = _as_grid(x), _as_grid(K)
    if stride not in (1, 2):
        raise DomainError(f"conv2d_3x3: stride must be 1 or 2, got {stride}")
    if x.data.ndim != 3 or K.data.ndim != 4 or K.shape[1:] != (x.shape[0], 3, 3):
        raise DomainError(f"conv2d_3x3: input {x.shape} incompatible with kernel {K.shape}")
    if b is not None:
        b = _as_grid(b)
        if b.shape != (K.shape[0],):
            raise DomainError(f"conv2d_3x3: bias {b.shape} incompatible with kernel {K.shape}")
    C, H, W = x.shape
    O = K.shape[0]
    Ho, Wo = (H - 1) // stride + 1, (W - 1) // stride + 1
    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1)))
    cols = _im2col(xp, stride, Ho, Wo)
    Kf = K.data.reshape(O, C * 9)
    out = cols @ Kf.T
    if b is not None:
        out = out + b.data
    out = np.ascontiguousarray(out.T).reshape(O, Ho, Wo)

    def bw(g):
        gf = g.reshape(O, Ho * Wo)
        gK = (gf @ cols).reshape(K.shape)
        gcols = (gf.T @ Kf).T.reshape(C, 3, 3, Ho, Wo)
        gxp = np.zeros_like(xp)
        for di in range(3):
            for dj in range(3):
                gxp[:, di : di + stride * Ho : stride, dj : dj + stride * Wo : stride] += gcols[:, di, dj]
        gx = gxp[:, 1 : H + 1, 1 : W + 1]
        if b is None:
            return (gx, gK)
        return (gx, gK, gf.sum(axis=1))

    parents = (x, K, b) if b is not None else (x, K)
    return Grid.from_op(out, parents, bw)


def repeat_rows(x: Grid, n: int) -> Grid:
    """(d,) -> (n, d) by stacking copies; gradients are summed back."""
    x = _as_grid(x)
    if x.data.ndim != 1:
        raise DomainError(f"repeat_rows expects a vector, got {x.shape}")
    out = np.broadcast_to(x.data, (n,) + x.shape).copy()
    return Grid.from_op(out, (x,), lambda g: (g.sum(axis=0),))
