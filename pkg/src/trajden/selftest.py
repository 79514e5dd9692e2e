"""Fast oracle and invariant checks, run by ``trajden selftest``."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import encoders, matcher
from .autodiff import Grid, ParamStore, losses, ops
from .autodiff.gradcheck import check
from .diffusion import AnchorBatch, DenoiserConfig, build_schedule, denoise_batch, forward_noise, refinement_loss, register_denoiser
from .evalkit import compute_metrics
from .geometry import NormBox, Pose, Trajectory, denormalize_trajectory, normalize_trajectory
from .worldgen import GpsNoiseSpec, corrupt_gps, generate_tile, render_polar_observation


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str


def _away(x: np.ndarray, margin: float = 0.05) -> np.ndarray:
    # keep inputs off kinks so central differences stay valid
    return np.where(x >= 0, x + margin, x - margin)


def op_gradient_cases(rng: np.random.Generator):
    """(name, build, arrays) triples covering every differentiable op."""
    A = rng.normal(size=(3, 4))
    B = rng.normal(size=(3, 4))
    W = rng.normal(size=(5, 4))
    bias = rng.normal(size=5)
    v = rng.normal(size=4)
    img = rng.normal(size=(2, 6, 6))
    K = rng.normal(size=(3, 2, 3, 3)) * 0.5
    kb = rng.normal(size=3)
    Msp = sp.random(10, 36, density=0.3, random_state=int(rng.integers(1 << 31)), format="csr")
    const = rng.normal(size=(3, 4))
    l1_target = A - _away(rng.normal(size=A.shape))
    w34 = Grid(rng.normal(size=(3, 4)), dtype=np.float64)

    def dot(g, wgrid=None):
        wgrid = wgrid if wgrid is not None else Grid(np.cos(np.arange(g.data.size)).reshape(g.shape) + 0.5, dtype=np.float64)
        return ops.sum_all(ops.mul(g, wgrid))

    return [
        ("add", lambda a, b: dot(ops.add(a, b), w34), [A, B]),
        ("sub", lambda a, b: dot(ops.sub(a, b), w34), [A, B]),
        ("mul", lambda a, b: dot(ops.mul(a, b), w34), [A, B]),
        ("scale", lambda a: dot(ops.scale(a, -1.7), w34), [A]),
        ("reshape", lambda a: dot(ops.reshape(a, (4, 3))), [A]),
        ("take", lambda a: dot(ops.take(a, 1, axis=0)), [A]),
        ("sum_all", lambda a: ops.sum_all(ops.mul(a, a)), [A]),
        ("mean_all", lambda a: ops.mean_all(ops.mul(a, a)), [A]),
        ("linear_vec", lambda x, w, b: dot(ops.linear(x, w, b)), [v, W, bias]),
        ("linear_batch", lambda x, w, b: dot(ops.linear(x, w, b)), [A, W, bias]),
        ("relu", lambda a: dot(ops.relu(a), w34), [_away(A)]),
        ("layer_norm", lambda a: dot(ops.layer_norm(a, axis=-1), w34), [A]),
        ("softmax", lambda a: dot(ops.softmax(a, axis=-1), w34), [A]),
        ("log_softmax", lambda a: dot(ops.log_softmax(a, axis=0), w34), [A]),
        ("concat", lambda a, b: dot(ops.concat([a, b], axis=1)), [A, B]),
        ("mean_pool", lambda x: dot(ops.mean_pool(x)), [img]),
        ("avg_pool", lambda x: dot(ops.avg_pool(x, 2)), [img]),
        ("mul_const", lambda a: dot(ops.mul_const(a, const), w34), [A]),
        ("sparse_map", lambda x: dot(ops.sparse_map(x, Msp)), [img]),
        ("conv2d_s1", lambda x, k, b: dot(ops.conv2d_3x3(x, k, b, stride=1)), [img, K, kb]),
        ("conv2d_s2", lambda x, k, b: dot(ops.conv2d_3x3(x, k, b, stride=2)), [img, K, kb]),
        ("repeat_rows", lambda x: dot(ops.repeat_rows(x, 3)), [v]),
        ("score_volume", lambda b, m: dot(matcher.score_volume(b, m, 4)), [rng.normal(size=(2, 3, 3)), rng.normal(size=(2, 5, 5))]),
        ("l1_loss", lambda a: losses.l1_loss(a, l1_target), [A]),
        ("bce_mean", lambda a: losses.bce_with_logits(a, (B > 0).astype(float)), [A]),
        ("bce_sum", lambda a: losses.bce_with_logits(a, (B > 0).astype(float), reduction="sum"), [A]),
    ]


def loss_head_cases(rng: np.random.Generator):
    """Localization NLL through the matcher and refinement loss through a miniature denoiser."""
    bev = rng.normal(size=(2, 4, 4))
    fmap = rng.normal(size=(2, 6, 6))
    gt = Pose(2.3, 3.1, 0.8)

    def loc(b, m):
        return matcher.localization_loss(matcher.score_volume(b, m, 4), gt, (0.0, 0.0), 1.0, smoothing=0.1)

    cfg = DenoiserConfig(traj_len=3, embed=8, hidden=8, time_dim=4, cond_dim=5, n_anchor=4, ladder=(4, 2))
    params = ParamStore(int(rng.integers(1 << 31)), np.float64)
    register_denoiser(params, cfg)
    for n, p in params:
        # the refine head starts at zero; perturb it so its gradient path is exercised
        if p.data.std() == 0:
            p.data = rng.normal(scale=0.3, size=p.shape)
    names = params.names()
    anchors = rng.normal(size=(4, 3, 4)) * 0.5
    gt_n = anchors[2] + _away(rng.normal(scale=0.2, size=(3, 4)), 0.02)
    cond = rng.normal(size=5)

    def refine(c, *ws):
        for n, w in zip(names, ws):
            params._params[n] = w
        batch = denoise_batch(AnchorBatch(anchors, 3), c, params, cfg)
        return refinement_loss(batch, gt_n, lam=0.7)

    return [
        ("localization_loss", loc, [bev, fmap]),
        ("refinement_loss", refine, [cond] + [params[n].data.copy() for n in names]),
    ]


def check_gradients(seeds=range(5), tol: float = 1e-4, h: float = 1e-6) -> list[CheckResult]:
    out = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        for name, build, arrays in op_gradient_cases(rng) + loss_head_cases(rng):
            err = check(build, arrays, h)
            out.append(CheckResult(f"grad/{name}/seed{seed}", err < tol, f"rel err {err:.2e}"))
    return out


def noise_law_errors(target: float, draws: int, seed: int = 0, steps: int = 1000):
    """Monte Carlo (mean, variance) errors of forward_noise at the timestep whose abar is nearest ``target``.

    Mean error is absolute on data in [-1, 1]; variance error is relative to 1 - abar.
    """
    sched = build_schedule(steps)
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, size=8)
    t = int(np.argmin(np.abs(sched.alpha_bar[1:] - target))) + 1
    ab = sched.alpha_bar[t]
    xt = forward_noise(np.broadcast_to(x, (draws, 8)), t, sched, rng)
    mean_err = float(np.max(np.abs(xt.mean(axis=0) - math.sqrt(ab) * x)))
    var_err = float(np.max(np.abs(xt.var(axis=0) - (1 - ab)) / (1 - ab)))
    return t, ab, mean_err, var_err


def check_forward_noise(draws: int = 100_000, seed: int = 0) -> list[CheckResult]:
    out = []
    for target in (0.9, 0.5, 0.1):
        t, ab, me, ve = noise_law_errors(target, draws, seed)
        out.append(CheckResult(f"forward_noise/abar~{target}", me < 0.01 and ve < 0.02,
                               f"t={t} abar={ab:.4f} mean {me:.4f} var {ve:.4f}"))
    return out


def planted_scores(seed: int, C: int = 4, size: int = 8, K: int = 4):
    """Map features built by stamping a rotated BEV template at a known pose."""
    rng = np.random.default_rng(seed)
    bev = rng.normal(size=(C, 4, 4))
    h = matcher.template_half(4, 4)
    r, c, k = int(rng.integers(0, size)), int(rng.integers(0, size)), int(rng.integers(0, K))
    tmpl = (matcher.rotation_matrices(4, 4, K)[k] @ bev.reshape(C, -1).T).T.reshape(C, 2 * h, 2 * h)
    fmap = rng.normal(scale=0.1, size=(C, size, size))
    for u in range(2 * h):
        for v in range(2 * h):
            y, x = r + u - h, c + v - h
            if 0 <= y < size and 0 <= x < size:
                fmap[:, y, x] += tmpl[:, u, v]
    S = matcher.score_volume(Grid(bev, dtype=np.float64), Grid(fmap, dtype=np.float64), K)
    return S.data, (r, c, k), bev, fmap


def check_matcher(seeds=range(20), tol: float = 1e-5, planted: int = 20) -> list[CheckResult]:
    out = []
    worst = 0.0
    rng = np.random.default_rng(1234)
    for seed in seeds:
        r = np.random.default_rng(seed)
        bev, fmap = r.normal(size=(3, 4, 4)), r.normal(size=(3, 8, 8))
        S = matcher.score_volume(Grid(bev, dtype=np.float64), Grid(fmap, dtype=np.float64), 4).data
        worst = max(worst, float(np.abs(S - matcher.score_volume_bruteforce(bev, fmap, 4)).max()))
    out.append(CheckResult("matcher/bruteforce", worst < tol, f"max abs diff {worst:.2e}"))
    hits = 0
    for seed in range(planted):
        S, truth, _, _ = planted_scores(int(rng.integers(1 << 31)) + seed)
        hits += matcher.belief_from_scores(S).index == truth
    out.append(CheckResult("matcher/planted", hits >= math.ceil(0.95 * planted), f"{hits}/{planted} recovered"))
    return out


def polar_roundtrip_mad(n_poses: int = 50, seed: int = 0) -> float:
    tile = generate_tile(seed)
    rng = np.random.default_rng(seed)
    mask = encoders.fov_mask()
    devs = []
    for _ in range(n_poses):
        x = tile.origin[0] + rng.uniform(20, 108)
        y = tile.origin[1] + rng.uniform(20, 108)
        pose = Pose(x, y, rng.uniform(-math.pi, math.pi))
        obs = render_polar_observation(tile, pose, obs_noise=0.0, additive_std=0.0)
        bev = encoders.polar_to_cartesian(obs).data
        ref = encoders.cartesian_crop(tile, pose)
        devs.append(np.abs(bev - ref)[:, mask].mean())
    return float(np.mean(devs))


def check_polar(n_poses: int = 50) -> list[CheckResult]:
    mad = polar_roundtrip_mad(n_poses)
    return [CheckResult("polar/roundtrip", mad < 0.08, f"MAD {mad:.4f}")]


def check_normalization(n: int = 100) -> list[CheckResult]:
    worst = 0.0
    for seed in range(n):
        rng = np.random.default_rng(seed)
        box = NormBox(tuple(rng.uniform(-100, 100, 2)), float(rng.uniform(20, 100)))
        xy = np.asarray(box.center) + rng.uniform(-1, 1, size=(16, 2)) * box.half_extent
        traj = Trajectory(np.arange(16), xy, rng.uniform(-math.pi, math.pi, 16))
        back = denormalize_trajectory(normalize_trajectory(traj, box), box)
        worst = max(worst, float(np.abs(back.xy - traj.xy).max()))
    return [CheckResult("normalization/roundtrip", worst < 1e-9, f"max err {worst:.2e} m")]


def check_metrics() -> list[CheckResult]:
    gt = Pose(0.0, 0.0, 0.0)
    pairs = [(Pose(d, 0.0, 0.0), gt) for d in (0.5, 1.5, 4.0, 9.0)]
    rep = compute_metrics(pairs)
    got = [rep.position[str(t)] for t in (1, 2, 5, 10)]
    return [CheckResult("metrics/hand_case", got == [0.25, 0.5, 0.75, 1.0], f"position recall {got}")]


def check_gps_noise(seed: int = 0) -> list[CheckResult]:
    n = 16
    gt = Trajectory(np.arange(n), np.column_stack([np.arange(n) * 10.0, np.zeros(n)]), np.zeros(n))
    spec = GpsNoiseSpec(sigma_white=3.0, sigma_walk=0.0, dropout_prob=0.0)
    rng = np.random.default_rng(seed)
    errs = np.concatenate([corrupt_gps(gt, spec, rng).xy - gt.xy for _ in range(2000)])
    std = float(errs.std())
    return [CheckResult("gps/white_noise_std", abs(std - 3.0) < 0.1, f"std {std:.3f} (expected 3.0)")]


def run_all(quick: bool = True) -> list[CheckResult]:
    results = []
    results += check_forward_noise(20_000 if quick else 100_000)
    results += check_gradients(range(2) if quick else range(5))
    results += check_matcher(range(5) if quick else range(20))
    results += check_polar(10 if quick else 50)
    results += check_normalization()
    results += check_metrics()
    results += check_gps_noise()
    return results
