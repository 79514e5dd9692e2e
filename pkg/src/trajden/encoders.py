"""Observation and map encoders plus the fusion that produces the diffusion condition."""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .autodiff import Grid, ParamStore, ops
from .geometry import DomainError
from .sampling import bilinear_matrix
from .worldgen import FOV_HALF, POLAR_BINS, POLAR_RES, MapTile, PolarObservation

FEAT_CH = 16
BEV_PX = 64
BEV_RES = 0.5
BEV_FORWARD = BEV_PX * BEV_RES  # 32 m
COND_DIM = 128
SUMMARY_DIM = 4  # soft-argmax (x, y, heading) + normalized entropy


def bev_cell_offsets(px: int = BEV_PX, res: float = BEV_RES):
    """Ego (forward, left) metres of BEV cell centres; rows run forward, cols run right-to-left."""
    f = (np.arange(px) + 0.5) * res
    l = (np.arange(px) + 0.5) * res - px * res / 2
    return np.meshgrid(f, l, indexing="ij")


@lru_cache(maxsize=None)
def _polar_to_cart_matrix() -> tuple[sp.csr_matrix, np.ndarray]:
    F, L = bev_cell_offsets()
    r = np.hypot(F, L)
    a = np.arctan2(L, F)
    inside = (np.abs(a) <= FOV_HALF) & (r < POLAR_BINS * POLAR_RES)
    az_width = 2 * FOV_HALF / POLAR_BINS
    ri = np.clip(r / POLAR_RES - 0.5, 0, POLAR_BINS - 1)
    ai = np.clip((a + FOV_HALF) / az_width - 0.5, 0, POLAR_BINS - 1)
    M = bilinear_matrix(ri, ai, POLAR_BINS, POLAR_BINS)
    M = sp.diags(inside.ravel().astype(np.float64)) @ M
    return M.tocsr(), inside


def fov_mask() -> np.ndarray:
    """Boolean (64, 64) mask of BEV cells covered by the polar sensor."""
    return _polar_to_cart_matrix()[1]


def polar_to_cartesian(obs) -> Grid:
    """Resample a (3, range, azimuth) polar grid onto the (3, 64, 64) ego BEV grid."""
    grid = obs.grid if isinstance(obs, PolarObservation) else obs
    g = grid if isinstance(grid, Grid) else Grid(np.asarray(grid, dtype=np.float32))
    if g.shape[1:] != (POLAR_BINS, POLAR_BINS):
        raise DomainError(f"polar grid must be (C, {POLAR_BINS}, {POLAR_BINS}), got {g.shape}")
    M, _ = _polar_to_cart_matrix()
    return ops.sparse_map(g, M, (BEV_PX, BEV_PX))


def cartesian_crop(tile: MapTile, pose) -> np.ndarray:
    """Direct bilinear crop of the tile on the ego BEV grid (reference for the polar path)."""
    F, L = bev_cell_offsets()
    c, s = math.cos(pose.theta), math.sin(pose.theta)
    return tile.sample(pose.x + c * F - s * L, pose.y + s * F + c * L)


# ----------------------------------------------------------------------------
# conv stacks


def register_bev_encoder(params: ParamStore, channels: int = FEAT_CH, in_ch: int = 3, prefix: str = "bev") -> None:
    widths = [in_ch, channels, channels, channels]
    for i in range(3):
        params.add(f"{prefix}.conv{i}.w", (widths[i + 1], widths[i], 3, 3))
        params.add(f"{prefix}.conv{i}.b", (widths[i + 1],), zero=True)


def register_map_encoder(params: ParamStore, channels: int = FEAT_CH, in_ch: int = 3, prefix: str = "map") -> None:
    register_bev_encoder(params, channels, in_ch, prefix)


def _conv_stack(x: Grid, params: ParamStore, prefix: str, strides) -> Grid:
    for i, stride in enumerate(strides):
        x = ops.conv2d_3x3(x, params[f"{prefix}.conv{i}.w"], params[f"{prefix}.conv{i}.b"], stride=stride)
        x = ops.relu(x)
        x = ops.layer_norm(x, axis=0)
    return x


def encode_bev(bev_raw: Grid, params: ParamStore, prefix: str = "bev") -> Grid:
    """Three stride-1 conv blocks (conv, relu, channel layer norm)."""
    if bev_raw.data.ndim != 3 or bev_raw.shape[0] != params[f"{prefix}.conv0.w"].shape[1]:
        raise DomainError(f"encode_bev: input {bev_raw.shape} incompatible with {params[f'{prefix}.conv0.w'].shape}")
    return _conv_stack(bev_raw, params, prefix, (1, 1, 1))


def encode_map(tile, params: ParamStore, prefix: str = "map") -> Grid:
    """Conv stack with two stride-2 blocks: (3, 256, 256) -> (16, 64, 64)."""
    x = tile.grid if isinstance(tile, MapTile) else tile
    x = x if isinstance(x, Grid) else Grid(np.asarray(x, dtype=np.float32))
    if x.data.ndim != 3 or x.shape[0] != params[f"{prefix}.conv0.w"].shape[1]:
        raise DomainError(f"encode_map: input {x.shape} incompatible with {params[f'{prefix}.conv0.w'].shape}")
    return _conv_stack(x, params, prefix, (2, 2, 1))


# ----------------------------------------------------------------------------
# fusion


def register_fusion(params: ParamStore, channels: int = FEAT_CH, cond_dim: int = COND_DIM, prefix: str = "fuse") -> None:
    d_in = 2 * channels + SUMMARY_DIM
    params.add(f"{prefix}.l0.w", (cond_dim, d_in))
    params.add(f"{prefix}.l0.b", (cond_dim,), zero=True)
    params.add(f"{prefix}.l1.w", (cond_dim, cond_dim), gain=1.0)
    params.add(f"{prefix}.l1.b", (cond_dim,), zero=True)


def score_summary(S, cell_xy_norm: np.ndarray | None = None, thetas: np.ndarray | None = None) -> np.ndarray:
    """[soft-argmax x, y, heading/pi, entropy / ln(N)] of softmax(S) over a (rows, cols, K) volume.

    ``cell_xy_norm`` gives the normalized (x, y) of every (row, col) cell as a
    (rows, cols, 2) array; by default cells span [-1, 1] uniformly.
    """
    s = np.asarray(S.data if isinstance(S, Grid) else S, dtype=np.float64)
    H, W, K = s.shape
    m = s.max()
    p = np.exp(s - m)
    z = float(p.sum())
    p /= z
    if cell_xy_norm is None:
        ys = np.linspace(-1, 1, H)
        xs = np.linspace(-1, 1, W)
        X, Y = np.meshgrid(xs, ys)
        cell_xy_norm = np.stack([X, Y], axis=-1)
    if thetas is None:
        thetas = 2 * np.pi * np.arange(K) / K
    pxy = p.sum(axis=2)
    x = float((pxy * cell_xy_norm[..., 0]).sum())
    y = float((pxy * cell_xy_norm[..., 1]).sum())
    pk = p.sum(axis=(0, 1))
    heading = math.atan2(float(pk @ np.sin(thetas)), float(pk @ np.cos(thetas)))
    # H = log Z - E[s - max]; exact for a uniform volume
    ent = (math.log(z) - float((p * (s - m)).sum())) / math.log(H * W * K)
    return np.array([x, y, heading / math.pi, ent])


def fuse_condition(F_bev: Grid, F_map: Grid, S, params: ParamStore, cell_xy_norm: np.ndarray | None = None,
                   thetas: np.ndarray | None = None, prefix: str = "fuse") -> Grid:
    """Pooled BEV and map embeddings plus a summary of the score volume -> condition vector.

    The score summary enters as a constant; only the pooled features carry
    gradients back into the encoders.
    """
    summary = score_summary(S, cell_xy_norm, thetas).astype(F_bev.dtype)
    z = ops.concat([ops.mean_pool(F_bev), ops.mean_pool(F_map), Grid(summary)], axis=0)
    h = ops.relu(ops.linear(z, params[f"{prefix}.l0.w"], params[f"{prefix}.l0.b"]))
    return ops.linear(h, params[f"{prefix}.l1.w"], params[f"{prefix}.l1.b"])
