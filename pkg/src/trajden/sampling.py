"""Bilinear sampling with zero padding, as dense evaluation or as a sparse linear map."""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp


def _corners(rows: np.ndarray, cols: np.ndarray, H: int, W: int):
    r0 = np.floor(rows).astype(np.int64)
    c0 = np.floor(cols).astype(np.int64)
    fr = rows - r0
    fc = cols - c0
    out = []
    for dr, dc, w in ((0, 0, (1 - fr) * (1 - fc)), (0, 1, (1 - fr) * fc), (1, 0, fr * (1 - fc)), (1, 1, fr * fc)):
        r, c = r0 + dr, c0 + dc
        ok = (r >= 0) & (r < H) & (c >= 0) & (c < W)
        out.append((r, c, np.where(ok, w, 0.0), ok))
    return out


def bilinear_sample(grid: np.ndarray, rows, cols) -> np.ndarray:
    """Sample (C, H, W) ``grid`` at fractional pixel coordinates (pixel centers are integers).

    Samples falling outside the grid read zero. Returns (C, *rows.shape) in float64.
    """
    rows = np.asarray(rows, dtype=np.float64)
    cols = np.asarray(cols, dtype=np.float64)
    C, H, W = grid.shape
    g = grid.astype(np.float64, copy=False)
    out = np.zeros((C,) + rows.shape)
    for r, c, w, ok in _corners(rows, cols, H, W):
        rr = np.where(ok, r, 0)
        cc = np.where(ok, c, 0)
        out += g[:, rr, cc] * w
    return out


def bilinear_matrix(rows, cols, H: int, W: int) -> sp.csr_matrix:
    """Sparse (n_samples, H*W) matrix whose product with a flattened grid equals bilinear_sample."""
    rows = np.asarray(rows, dtype=np.float64).ravel()
    cols = np.asarray(cols, dtype=np.float64).ravel()
    n = rows.size
    I, J, V = [], [], []
    for r, c, w, ok in _corners(rows, cols, H, W):
        keep = ok & (w != 0)
        I.append(np.nonzero(keep)[0])
        J.append((r * W + c)[keep])
        V.append(w[keep])
    M = sp.csr_matrix((np.concatenate(V), (np.concatenate(I), np.concatenate(J))), shape=(n, H * W))
    M.sum_duplicates()
    return M
