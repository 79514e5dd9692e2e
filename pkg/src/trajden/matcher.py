"""Exhaustive BEV-to-map pose scoring and the label-smoothed localization loss.

Hypothesis (row, col, k) places the vehicle at ``origin + (col, row) * cell``
with heading ``2 pi k / K``. The BEV template is rotated into the map frame
around the vehicle and cross-correlated with the map features over every
translation; map cells outside the tile read zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.fft as sfft
import scipy.sparse as sp

from .autodiff import Grid, ops
from .autodiff.losses import nll_from_logscores
from .geometry import DomainError, Pose, wrap_angle
from .sampling import bilinear_matrix

THETA_BINS = 16


def bin_angles(K: int) -> np.ndarray:
    return np.array([wrap_angle(2 * math.pi * k / K) for k in range(K)])


def angle_to_bin(theta: float, K: int) -> int:
    return int(round(wrap_angle(theta) * K / (2 * math.pi))) % K


def template_half(Hb: int, Wb: int) -> int:
    return int(math.ceil(math.hypot(Hb, Wb / 2)))


def template_offsets(Hb: int, Wb: int):
    """Map-frame offsets (dx, dy), in cells, of template cell centres around the vehicle."""
    h = template_half(Hb, Wb)
    o = np.arange(2 * h) - h + 0.5
    dx, dy = np.meshgrid(o, o)  # rows = dy
    return dx, dy


def template_sample_coords(Hb: int, Wb: int, theta: float):
    """Fractional BEV (row, col) read by each template cell for heading ``theta``."""
    dx, dy = template_offsets(Hb, Wb)
    c, s = math.cos(theta), math.sin(theta)
    f = c * dx + s * dy
    l = -s * dx + c * dy
    return f - 0.5, l + Wb / 2 - 0.5


@lru_cache(maxsize=32)
def rotation_matrices(Hb: int, Wb: int, K: int) -> tuple[sp.csr_matrix, ...]:
    mats = []
    for theta in bin_angles(K):
        ri, ci = template_sample_coords(Hb, Wb, theta)
        mats.append(bilinear_matrix(ri, ci, Hb, Wb))
    return tuple(mats)


def _fft_size(H: int, n: int) -> int:
    return H + n


def score_volume(F_bev: Grid, F_map: Grid, K: int = THETA_BINS) -> Grid:
    """(C, Hb, Wb) BEV features against (C, H, W) map features -> (H, W, K) log-scores."""
    if F_bev.data.ndim != 3 or F_map.data.ndim != 3 or F_bev.shape[0] != F_map.shape[0]:
        raise DomainError(f"score_volume: BEV {F_bev.shape} incompatible with map {F_map.shape}")
    C, Hb, Wb = F_bev.shape
    _, H, W = F_map.shape
    h = template_half(Hb, Wb)
    n = 2 * h
    P, Q = _fft_size(H, n), _fft_size(W, n)
    norm = 1.0 / math.sqrt(C * Hb * Wb)
    mats = rotation_matrices(Hb, Wb, K)
    # FFTs run in the input precision (complex64 for float32 training)
    ft_dtype = np.float64 if F_bev.dtype == np.float64 else np.float32
    bev = F_bev.data.reshape(C, -1).astype(ft_dtype)
    templates = np.stack([(M @ bev.T).T.reshape(C, n, n) for M in mats]).astype(ft_dtype)  # (K, C, n, n)
    fm = sfft.rfft2(F_map.data.astype(ft_dtype), s=(P, Q))  # (C, P, Q')
    ft = sfft.rfft2(templates, s=(P, Q))  # (K, C, P, Q')
    corr = sfft.irfft2(np.einsum("kcpq,cpq->kpq", np.conj(ft), fm), s=(P, Q))
    # entry s of the circular correlation is the shift r - h
    corr = np.roll(corr, (h, h), axis=(1, 2))[:, :H, :W]
    out = (np.transpose(corr, (1, 2, 0)) * norm).astype(F_bev.dtype)

    def bw(g):
        g = np.transpose(g.astype(ft_dtype), (2, 0, 1)) * ft_dtype(norm)  # (K, H, W)
        D = np.zeros((K, P, Q), dtype=ft_dtype)
        D[:, :H, :W] = g
        D = np.roll(D, (-h, -h), axis=(1, 2))
        fd = sfft.rfft2(D)
        # map gradient: convolution of the score gradient with each template
        gmap = sfft.irfft2(np.einsum("kpq,kcpq->cpq", fd, ft), s=(P, Q))[:, :H, :W]
        # template gradient: correlation of the map with the score gradient
        gtemp = sfft.irfft2(np.conj(fd)[:, None] * fm[None], s=(P, Q))[:, :, :n, :n]
        gbev = np.zeros((C, Hb * Wb))
        for k, M in enumerate(mats):
            gbev += (M.T @ gtemp[k].reshape(C, -1).T).T
        return gbev.reshape(C, Hb, Wb).astype(F_bev.dtype), gmap.astype(F_map.dtype)

    return Grid.from_op(out, (F_bev, F_map), bw)


def score_volume_bruteforce(F_bev: np.ndarray, F_map: np.ndarray, K: int) -> np.ndarray:
    """Reference loop over every hypothesis and template cell (test oracle)."""
    C, Hb, Wb = F_bev.shape
    _, H, W = F_map.shape
    h = template_half(Hb, Wb)
    n = 2 * h
    out = np.zeros((H, W, K))
    norm = 1.0 / math.sqrt(C * Hb * Wb)
    for k, theta in enumerate(bin_angles(K)):
        ri, ci = template_sample_coords(Hb, Wb, theta)
        tmpl = np.zeros((C, n, n))
        for u in range(n):
            for v in range(n):
                r0, c0 = math.floor(ri[u, v]), math.floor(ci[u, v])
                fr, fc = ri[u, v] - r0, ci[u, v] - c0
                for rr, cc, w in ((r0, c0, (1 - fr) * (1 - fc)), (r0, c0 + 1, (1 - fr) * fc),
                                  (r0 + 1, c0, fr * (1 - fc)), (r0 + 1, c0 + 1, fr * fc)):
                    if 0 <= rr < Hb and 0 <= cc < Wb:
                        tmpl[:, u, v] += w * F_bev[:, rr, cc]
        for r in range(H):
            for c in range(W):
                acc = 0.0
                for u in range(n):
                    y = r + u - h
                    if not 0 <= y < H:
                        continue
                    for v in range(n):
                        x = c + v - h
                        if 0 <= x < W:
                            acc += float(tmpl[:, u, v] @ F_map[:, y, x])
                out[r, c, k] = acc * norm
    return out


# ----------------------------------------------------------------------------
# beliefs and loss


@dataclass(frozen=True)
class PoseBelief:
    pose: Pose
    index: tuple[int, int, int]
    log_prob: np.ndarray  # normalized (H, W, K)


def hypothesis_pose(index, origin, cell: float, K: int) -> Pose:
    r, c, k = index
    return Pose(origin[0] + c * cell, origin[1] + r * cell, bin_angles(K)[k])


def gt_index(gt: Pose, origin, cell: float, shape) -> tuple[int, int, int]:
    H, W, K = shape
    c = int(round((gt.x - origin[0]) / cell))
    r = int(round((gt.y - origin[1]) / cell))
    if not (0 <= r < H and 0 <= c < W):
        raise DomainError(f"ground-truth pose ({gt.x:.2f}, {gt.y:.2f}) falls outside the score volume")
    return r, c, angle_to_bin(gt.theta, K)


def belief_from_scores(S, origin=(0.0, 0.0), cell: float = 1.0) -> PoseBelief:
    s = np.asarray(S.data if isinstance(S, Grid) else S, dtype=np.float64)
    m = s.max()
    logp = s - (m + math.log(np.exp(s - m).sum()))
    # np.argmax returns the first maximum in C order, i.e. lowest (row, col, bin)
    idx = tuple(int(i) for i in np.unravel_index(int(np.argmax(s)), s.shape))
    return PoseBelief(hypothesis_pose(idx, origin, cell, s.shape[2]), idx, logp)


def smoothing_support(index, shape) -> np.ndarray:
    """Flat indices of the 3x3x3 neighbourhood (heading wrapped, space clipped)."""
    H, W, K = shape
    r, c, k = index
    out = []
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            rr, cc = r + dr, c + dc
            if not (0 <= rr < H and 0 <= cc < W):
                continue
            for dk in (-1, 0, 1):
                out.append(np.ravel_multi_index((rr, cc, (k + dk) % K), shape))
    return np.array(sorted(set(out)))


def localization_loss(S: Grid, gt: Pose, origin=(0.0, 0.0), cell: float = 1.0, smoothing: float = 0.1) -> Grid:
    idx = gt_index(gt, origin, cell, S.shape)
    flat = int(np.ravel_multi_index(idx, S.shape))
    support = smoothing_support(idx, S.shape) if smoothing > 0 else None
    return nll_from_logscores(S, flat, smoothing, support)


def match(F_bev_pooled: Grid, F_map: Grid, visibility: np.ndarray | None = None, K: int = THETA_BINS) -> Grid:
    """Mask BEV cells the sensor cannot see, then score."""
    if visibility is not None:
        F_bev_pooled = ops.mul_const(F_bev_pooled, np.broadcast_to(visibility, F_bev_pooled.shape))
    return score_volume(F_bev_pooled, F_map, K)
