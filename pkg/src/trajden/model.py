"""Full forward pipeline shared by training and evaluation.

A ``Sample`` is one scenario expressed in some planar frame (world frame at
evaluation, a perturbed tile frame during training). ``forward`` runs the two
encoders, the matcher and the fusion; the denoiser is run by the caller.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import encoders, matcher
from .autodiff import Grid, ParamStore, ops
from .diffusion import DenoiserConfig, register_denoiser
from .geometry import NormBox, Trajectory
from .worldgen import TILE_RES, Frame, Scenario

POOL = 4
CELL = TILE_RES * POOL  # matcher cell, metres


@dataclass(frozen=True)
class ModelConfig:
    channels: int = encoders.FEAT_CH
    theta_bins: int = matcher.THETA_BINS
    smoothing: float = 0.1
    denoiser: DenoiserConfig = DenoiserConfig()


@dataclass(frozen=True, eq=False)
class Sample:
    tile: np.ndarray  # (3, 256, 256) in the sample frame
    tile_origin: tuple[float, float]
    obs: np.ndarray  # (3, 64, 64) polar
    gt: Trajectory
    gps: Trajectory
    frame: Frame  # sample frame -> world

    @property
    def box(self) -> NormBox:
        h = self.tile.shape[2] * TILE_RES / 2
        return NormBox((self.tile_origin[0] + h, self.tile_origin[1] + h), h)


@dataclass
class Forward:
    S: Grid
    F_bev: Grid
    F_map: Grid
    cond: Grid
    origin: tuple[float, float]


def build_params(seed: int, cfg: ModelConfig = ModelConfig(), with_denoiser: bool = True) -> ParamStore:
    params = ParamStore(seed)
    encoders.register_bev_encoder(params, cfg.channels)
    encoders.register_map_encoder(params, cfg.channels)
    encoders.register_fusion(params, cfg.channels, cfg.denoiser.cond_dim)
    if with_denoiser:
        register_denoiser(params, cfg.denoiser)
    return params


def sample_from_scenario(scn: Scenario) -> Sample:
    """Evaluation sample: the stored tile in world coordinates."""
    return Sample(scn.tile.grid, scn.tile.origin, scn.obs.grid, scn.gt_traj, scn.gps_traj, Frame((0.0, 0.0), 0.0))


@lru_cache(maxsize=None)
def pooled_visibility() -> np.ndarray:
    """Fraction of each pooled BEV cell inside the sensor field of view."""
    m = encoders.fov_mask().astype(np.float32)
    n = m.shape[0] // POOL
    return m.reshape(n, POOL, n, POOL).mean(axis=(1, 3))


def hypothesis_grid(origin, shape, box: NormBox) -> np.ndarray:
    """Normalized (x, y) of every score-volume cell, (rows, cols, 2)."""
    H, W = shape
    xs = (origin[0] + np.arange(W) * CELL - box.center[0]) / box.half_extent
    ys = (origin[1] + np.arange(H) * CELL - box.center[1]) / box.half_extent
    X, Y = np.meshgrid(xs, ys)
    return np.stack([X, Y], axis=-1)


def forward(sample: Sample, params: ParamStore, cfg: ModelConfig = ModelConfig()) -> Forward:
    bev = encoders.encode_bev(encoders.polar_to_cartesian(sample.obs), params)
    F_map = encoders.encode_map(Grid(sample.tile), params)
    pooled = ops.mul_const(ops.avg_pool(bev, POOL), np.broadcast_to(pooled_visibility(), (cfg.channels, 16, 16)))
    S = matcher.score_volume(pooled, F_map, cfg.theta_bins)
    origin = sample.tile_origin
    cells = hypothesis_grid(origin, S.shape[:2], sample.box)
    cond = encoders.fuse_condition(bev, F_map, S, params, cells, matcher.bin_angles(cfg.theta_bins))
    return Forward(S, bev, F_map, cond, origin)
