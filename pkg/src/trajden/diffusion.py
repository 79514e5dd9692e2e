"""Noise schedule, anchored denoiser, positive assignment and truncated sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Grid, ParamStore, ops
from .autodiff.losses import bce_with_logits, l1_loss
from .geometry import (
    DomainError,
    NormalizedTrajectory,
    NormBox,
    Pose,
    Trajectory,
    denormalize_trajectory,
    normalize_trajectory,
)
from .worldgen import TRAJ_LEN

CLIP = 1.5


class NumericalError(RuntimeError):
    """A network output went non-finite; ``diagnostics`` describes the anchors involved."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray  # index 0 unused (t = 0 is clean)
    alphas: np.ndarray
    alpha_bar: np.ndarray

    @property
    def steps(self) -> int:
        return len(self.betas) - 1


def build_schedule(steps: int = 100, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if steps < 2:
        raise DomainError(f"schedule needs at least 2 steps, got {steps}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise DomainError(f"invalid beta range [{beta_start}, {beta_end}]")
    betas = np.concatenate([[0.0], np.linspace(beta_start, beta_end, steps)])
    alphas = 1.0 - betas
    alpha_bar = np.cumprod(alphas)
    for a in (betas, alphas, alpha_bar):
        a.setflags(write=False)
    return NoiseSchedule(betas, alphas, alpha_bar)


def forward_noise(x0, t: int, schedule: NoiseSchedule, rng: np.random.Generator) -> np.ndarray:
    """Draw x_t ~ N(sqrt(abar_t) x0, (1 - abar_t) I)."""
    if not 1 <= t <= schedule.steps:
        raise DomainError(f"timestep {t} outside [1, {schedule.steps}]")
    x0 = np.asarray(x0, dtype=np.float64)
    ab = schedule.alpha_bar[t]
    eps = rng.standard_normal(x0.shape)
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


# ----------------------------------------------------------------------------
# denoiser


@dataclass(frozen=True)
class DenoiserConfig:
    traj_len: int = TRAJ_LEN
    embed: int = 128
    hidden: int = 256
    time_dim: int = 64
    cond_dim: int = 128
    n_anchor: int = 8
    ladder: tuple = (40, 20)
    lam: float = 1.0

    def __post_init__(self):
        if self.n_anchor < 1 or self.traj_len < 1:
            raise DomainError("denoiser needs at least one anchor and one trajectory point")
        if self.time_dim % 2:
            raise DomainError("time_dim must be even")
        if list(self.ladder) != sorted(self.ladder, reverse=True) or min(self.ladder) < 1:
            raise DomainError(f"sampling ladder must be decreasing positive timesteps, got {self.ladder}")


@dataclass
class AnchorBatch:
    anchors: np.ndarray  # (N, T, 4) noisy inputs
    t: int
    scores: Grid | None = None  # (N,)
    refined: Grid | None = None  # (N, T, 4)
    extra: dict = field(default_factory=dict)


def register_denoiser(params: ParamStore, cfg: DenoiserConfig = DenoiserConfig(), prefix: str = "den") -> None:
    d = cfg.traj_len * 4
    params.add(f"{prefix}.traj.w", (cfg.embed, d), gain=1.0)
    params.add(f"{prefix}.traj.b", (cfg.embed,), zero=True)
    params.add(f"{prefix}.time.w", (cfg.embed, cfg.time_dim), gain=1.0)
    params.add(f"{prefix}.time.b", (cfg.embed,), zero=True)
    params.add(f"{prefix}.h0.w", (cfg.hidden, 2 * cfg.embed + cfg.cond_dim))
    params.add(f"{prefix}.h0.b", (cfg.hidden,), zero=True)
    params.add(f"{prefix}.h1.w", (cfg.hidden, cfg.hidden))
    params.add(f"{prefix}.h1.b", (cfg.hidden,), zero=True)
    # zero refine head: an untrained model returns its anchors unchanged
    params.add(f"{prefix}.refine.w", (d, cfg.hidden), zero=True)
    params.add(f"{prefix}.refine.b", (d,), zero=True)
    params.add(f"{prefix}.score.w", (1, cfg.hidden), gain=1.0)
    params.add(f"{prefix}.score.b", (1,), zero=True)


def timestep_embedding(t: int, dim: int = 64) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    a = t * freqs
    return np.concatenate([np.sin(a), np.cos(a)])


def denoise_batch(batch: AnchorBatch, cond: Grid, params: ParamStore, cfg: DenoiserConfig = DenoiserConfig(),
                  prefix: str = "den") -> AnchorBatch:
    """Score and refine every anchor independently; fills ``batch.scores`` and ``batch.refined``."""
    N = cfg.n_anchor
    T = cfg.traj_len
    a = np.asarray(batch.anchors)
    if a.shape != (N, T, 4):
        raise DomainError(f"anchors must be ({N}, {T}, 4), got {a.shape}")
    if cond.shape != (cfg.cond_dim,):
        raise DomainError(f"condition must be ({cfg.cond_dim},), got {cond.shape}")
    dtype = params[f"{prefix}.traj.w"].dtype
    x = Grid(a.reshape(N, T * 4).astype(dtype))
    e_traj = ops.linear(x, params[f"{prefix}.traj.w"], params[f"{prefix}.traj.b"])
    temb = Grid(timestep_embedding(batch.t, cfg.time_dim).astype(dtype))
    e_time = ops.linear(temb, params[f"{prefix}.time.w"], params[f"{prefix}.time.b"])
    z = ops.concat([e_traj, ops.repeat_rows(e_time, N), ops.repeat_rows(cond, N)], axis=1)
    h = ops.layer_norm(ops.relu(ops.linear(z, params[f"{prefix}.h0.w"], params[f"{prefix}.h0.b"])))
    h = ops.layer_norm(ops.relu(ops.linear(h, params[f"{prefix}.h1.w"], params[f"{prefix}.h1.b"])))
    delta = ops.linear(h, params[f"{prefix}.refine.w"], params[f"{prefix}.refine.b"])
    refined = ops.reshape(ops.add(x, delta), (N, T, 4))
    scores = ops.reshape(ops.linear(h, params[f"{prefix}.score.w"], params[f"{prefix}.score.b"]), (N,))
    batch.scores = scores
    batch.refined = refined
    return batch


def assign_positive(anchors, gt_norm) -> int:
    """Index of the anchor nearest the ground truth (L2 over positions; first on ties)."""
    a = np.asarray(anchors, dtype=np.float64)
    g = np.asarray(gt_norm, dtype=np.float64)
    d = np.sqrt(((a[..., :2] - g[None, :, :2]) ** 2).sum(axis=(1, 2)))
    return int(np.argmin(d))


def refinement_loss(batch: AnchorBatch, gt_norm, lam: float = 1.0, positive: int | None = None) -> Grid:
    """L1 on the positive anchor's refinement plus lam times the summed BCE over anchor scores."""
    if batch.refined is None or batch.scores is None:
        raise DomainError("refinement_loss needs a denoised anchor batch")
    g = np.asarray(gt_norm, dtype=np.float64)
    k = assign_positive(batch.anchors, g) if positive is None else positive
    labels = np.zeros(batch.scores.shape)
    labels[k] = 1.0
    l1 = l1_loss(ops.take(batch.refined, k, axis=0), g)
    if lam == 0:
        return l1
    return ops.add(l1, ops.scale(bce_with_logits(batch.scores, labels, reduction="sum"), lam))


def _check_finite(batch: AnchorBatch) -> None:
    s = batch.scores.data
    r = batch.refined.data
    bad = ~np.isfinite(s) | ~np.isfinite(r).all(axis=(1, 2))
    if bad.any():
        raise NumericalError(
            f"non-finite denoiser output at t={batch.t} for anchors {np.nonzero(bad)[0].tolist()}",
            {
                "t": batch.t,
                "bad_anchors": np.nonzero(bad)[0].tolist(),
                "scores": s.tolist(),
                "anchor_abs_max": np.abs(batch.anchors).max(axis=(1, 2)).tolist(),
            },
        )


def sample_pose(gps: Trajectory, cond: Grid, params: ParamStore, schedule: NoiseSchedule, box: NormBox,
                rng: np.random.Generator, cfg: DenoiserConfig = DenoiserConfig(),
                prefix: str = "den") -> tuple[Trajectory, Pose]:
    """Truncated anchored sampling from the GPS prior; returns the trajectory and the query pose."""
    if len(gps) != cfg.traj_len:
        raise DomainError(f"GPS trajectory has {len(gps)} points, denoiser expects {cfg.traj_len}")
    x = normalize_trajectory(gps, box).values
    src = np.broadcast_to(x, (cfg.n_anchor,) + x.shape)
    for t in cfg.ladder:
        batch = AnchorBatch(forward_noise(src, t, schedule, rng), t)
        denoise_batch(batch, cond, params, cfg, prefix)
        _check_finite(batch)
        # every anchor's refinement is re-noised for the next rung
        src = np.clip(batch.refined.data.astype(np.float64), -CLIP, CLIP)
    best = src[int(np.argmax(batch.scores.data))]
    traj = denormalize_trajectory(NormalizedTrajectory(gps.t, best), box)
    return traj, traj.pose(len(traj) - 1)
