"""Dual-objective training: refinement loss plus weighted localization loss."""

from __future__ import annotations

import csv
import json
import math
import os
import sys
import time
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import map_coordinates

from . import matcher, model
from .autodiff import AdamW, Grid, ParamStore, backward, load_checkpoint, ops, save_checkpoint
from .diffusion import AnchorBatch, NumericalError, build_schedule, denoise_batch, forward_noise, refinement_loss
from .geometry import DomainError, Pose, normalize_trajectory, wrap_angle
from .worldgen import TILE_PX, TILE_RES, Frame, Scenario, generate_world

ABLATION_MODES = ("full", "no_refinement", "no_loc")
CKPT_FORMAT = "trajden-checkpoint/1"
LOG_FIELDS = ("epoch", "l_total", "l_diff", "l_loc", "grad_norm", "l_total_median")


class ConfigError(DomainError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-2
    alpha: float = 1.0
    lam: float = 1.0
    batch: int = 8
    epochs: int = 30
    seed: int = 0
    perturb_rot: float = 30.0  # degrees
    perturb_trans: float = 30.0  # metres
    ablation_mode: str = "full"
    smoothing: float = 0.1
    workers: int = 1

    def __post_init__(self):
        if not (self.lr > 0 and math.isfinite(self.lr)):
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.alpha < 0 or self.lam < 0 or self.weight_decay < 0:
            raise ConfigError("alpha, lam and weight_decay must be non-negative")
        if self.batch < 1 or self.epochs < 1 or self.workers < 1:
            raise ConfigError("batch, epochs and workers must be >= 1")
        if self.perturb_rot < 0 or self.perturb_trans < 0:
            raise ConfigError("perturbation ranges must be non-negative")
        if self.ablation_mode not in ABLATION_MODES:
            raise ConfigError(f"ablation_mode must be one of {ABLATION_MODES}, got {self.ablation_mode!r}")
        if not 0 <= self.smoothing < 0.5:
            raise ConfigError(f"smoothing must lie in [0, 0.5), got {self.smoothing}")

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str, **overrides) -> "TrainConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
            key, val = (p.strip() for p in line.split("=", 1))
            if key not in kinds:
                raise ConfigError(f"line {lineno}: unknown config key {key!r}")
            values[key] = _parse(key, val, kinds[key])
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    @classmethod
    def from_file(cls, path, **overrides) -> "TrainConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise OSError(f"cannot read config {path}: {exc}") from exc
        return cls.from_text(text, **overrides)


def _parse(key: str, val: str, kind: str):
    try:
        if kind == "int":
            return int(val)
        if kind == "float":
            return float(val)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {val!r} as {kind}") from None
    return val


# ----------------------------------------------------------------------------
# augmentation


def perturb_pose(gt: Pose, cfg: TrainConfig, rng: np.random.Generator) -> Pose:
    """Uniform translation and rotation jitter around ``gt``."""
    dx, dy = rng.uniform(-cfg.perturb_trans, cfg.perturb_trans, size=2)
    rot = math.radians(cfg.perturb_rot)
    dth = rng.uniform(-rot, rot)
    return Pose(gt.x + dx, gt.y + dy, wrap_angle(gt.theta + dth))


class ContextRaster:
    """Axis-aligned raster around a scenario, large enough for any perturbed, rotated tile."""

    def __init__(self, scn: Scenario, reach: float):
        q = scn.gt_pose
        px = 2 * int(math.ceil(reach / TILE_RES))
        tile, _ = generate_world(scn.seed).rasterize((q.x, q.y), px=px)
        self.grid = tile.grid.astype(np.float16)
        self.origin = tile.origin

    def crop(self, frame: Frame, px: int = TILE_PX) -> np.ndarray:
        half = px * TILE_RES / 2
        ij = (np.arange(px) + 0.5) * TILE_RES - half
        lx, ly = np.meshgrid(ij, ij)
        w = frame.to_world(np.stack([lx, ly], axis=-1))
        col = (w[..., 0] - self.origin[0]) / TILE_RES - 0.5
        row = (w[..., 1] - self.origin[1]) / TILE_RES - 0.5
        out = np.empty((3, px, px), dtype=np.float32)
        for c in range(3):
            out[c] = map_coordinates(self.grid[c].astype(np.float32), [row, col], order=1, mode="constant", cval=0.0)
        return out


class RasterCache:
    def __init__(self, cfg: TrainConfig):
        # farthest tile corner from the ground truth, plus a margin
        self.reach = (TILE_PX * TILE_RES / 2 + cfg.perturb_trans) * math.sqrt(2) + 4.0
        self._items: dict[int, ContextRaster] = {}

    def get(self, scn: Scenario) -> ContextRaster:
        r = self._items.get(scn.seed)
        if r is None:
            r = self._items[scn.seed] = ContextRaster(scn, self.reach)
        return r


def training_sample(scn: Scenario, cfg: TrainConfig, rng: np.random.Generator, cache: RasterCache) -> model.Sample:
    """Tile centred on a perturbed ground-truth pose, expressed in that pose's frame."""
    q = scn.gt_pose
    p = perturb_pose(q, cfg, rng)
    frame = Frame((p.x, p.y), wrap_angle(p.theta - q.theta))
    grid = cache.get(scn).crop(frame)
    h = TILE_PX * TILE_RES / 2
    return model.Sample(grid, (-h, -h), scn.obs.grid, frame.traj_to_local(scn.gt_traj),
                        frame.traj_to_local(scn.gps_traj), frame)


# ----------------------------------------------------------------------------
# losses


def sample_loss(sample: model.Sample, params: ParamStore, cfg: TrainConfig, rng: np.random.Generator,
                mcfg: model.ModelConfig = model.ModelConfig()):
    fw = model.forward(sample, params, mcfg)
    q = len(sample.gt) - 1
    l_loc = matcher.localization_loss(fw.S, sample.gt.pose(q), fw.origin, model.CELL, cfg.smoothing)
    if cfg.ablation_mode == "no_refinement":
        return l_loc, {"l_total": l_loc.item(), "l_diff": 0.0, "l_loc": l_loc.item()}
    dcfg = mcfg.denoiser
    box = sample.box
    gt_n = normalize_trajectory(sample.gt, box).values
    gps_n = normalize_trajectory(sample.gps, box).values
    t = int(rng.choice(dcfg.ladder))
    anchors = forward_noise(np.broadcast_to(gps_n, (dcfg.n_anchor,) + gps_n.shape), t, _SCHEDULE, rng)
    batch = denoise_batch(AnchorBatch(anchors, t), fw.cond, params, dcfg)
    l_diff = refinement_loss(batch, gt_n, cfg.lam)
    if cfg.ablation_mode == "no_loc":
        total = l_diff
    else:
        total = ops.add(l_diff, ops.scale(l_loc, cfg.alpha))
    return total, {"l_total": total.item(), "l_diff": l_diff.item(), "l_loc": l_loc.item()}


_SCHEDULE = build_schedule()


def total_loss(scn: Scenario, params: ParamStore, cfg: TrainConfig, rng: np.random.Generator,
               cache: RasterCache | None = None, mcfg: model.ModelConfig = model.ModelConfig()):
    """L_total = L_diff + alpha * L_loc (or one term alone in the ablation modes)."""
    cache = cache if cache is not None else RasterCache(cfg)
    return sample_loss(training_sample(scn, cfg, rng, cache), params, cfg, rng, mcfg)


def sample_rng(cfg: TrainConfig, epoch: int, index: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, epoch, index])


def sample_grads(scn, index, epoch, params, cfg, cache, mcfg):
    params.zero_grad()
    loss, comps = total_loss(scn, params, cfg, sample_rng(cfg, epoch, index), cache, mcfg)
    if not math.isfinite(comps["l_total"]):
        raise NumericalError(f"non-finite loss on scenario {scn.scenario_id} (epoch {epoch})", comps)
    backward(loss)
    return params.grads(), comps


# ----------------------------------------------------------------------------
# worker pool

_W: dict = {}


def _worker_init(dataset, cfg, mcfg):
    _W.update(dataset=dataset, cfg=cfg, mcfg=mcfg, cache=RasterCache(cfg))
    _W["params"] = model.build_params(cfg.seed, mcfg)


def _worker_task(args):
    state, epoch, indices = args
    _W["params"].load_state(state)
    out = []
    for i in indices:
        g, comps = sample_grads(_W["dataset"][i], i, epoch, _W["params"], _W["cfg"], _W["cache"], _W["mcfg"])
        out.append((i, {k: v.copy() for k, v in g.items()}, comps))
    return out


# ----------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    params: ParamStore
    log: list[dict]
    checkpoint: Path


def sidecar_path(ckpt) -> Path:
    ckpt = Path(ckpt)
    return ckpt.with_name(ckpt.name + ".json")


def log_path_for(ckpt) -> Path:
    ckpt = Path(ckpt)
    return ckpt.with_name(ckpt.name + ".log.csv")


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def _write_log(path: Path, rows: list[dict]) -> None:
    lines = [",".join(LOG_FIELDS)]
    for r in rows:
        lines.append(",".join([str(int(r["epoch"]))] + [f"{float(r[k]):.9g}" for k in LOG_FIELDS[1:]]))
    _write_atomic(path, "\n".join(lines) + "\n")


def read_log(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return [{k: (int(v) if k == "epoch" else float(v)) for k, v in r.items()} for r in csv.DictReader(fh)]


def trainable_names(params: ParamStore, cfg: TrainConfig) -> list[str]:
    if cfg.ablation_mode == "no_refinement":
        return [n for n in params.names() if not n.startswith("den.")]
    return params.names()


def save_model(path, params: ParamStore, opt: AdamW | None, cfg: TrainConfig, epoch: int,
               mcfg: model.ModelConfig = model.ModelConfig()) -> None:
    path = Path(path)
    arrays = dict(params.state())
    if opt is not None:
        arrays.update(opt.state())
    arrays["__epoch__"] = np.array([epoch], dtype=np.float32)
    save_checkpoint(path, arrays)
    meta = {
        "format": CKPT_FORMAT,
        "epoch": epoch,
        "config": asdict(cfg),
        "model": {"channels": mcfg.channels, "theta_bins": mcfg.theta_bins, "smoothing": mcfg.smoothing,
                  "denoiser": asdict(mcfg.denoiser)},
        "param_count": params.count(),
    }
    _write_atomic(sidecar_path(path), json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_model(path, mcfg: model.ModelConfig = model.ModelConfig()) -> tuple[ParamStore, dict, dict]:
    """Parameters, checkpoint metadata and the raw array records of a saved model."""
    arrays = load_checkpoint(path)
    try:
        meta = json.loads(sidecar_path(path).read_text())
    except OSError as exc:
        raise OSError(f"cannot read checkpoint metadata {sidecar_path(path)}: {exc}") from exc
    if meta.get("format") != CKPT_FORMAT:
        raise ConfigError(f"{path}: unsupported checkpoint format {meta.get('format')!r}")
    params = model.build_params(0, mcfg)
    state = {k: v for k, v in arrays.items() if not k.startswith("__")}
    try:
        params.load_state(state)
    except DomainError as exc:
        raise ConfigError(f"{path}: checkpoint does not match the model: {exc}") from exc
    return params, meta, arrays


def train(dataset: list[Scenario], cfg: TrainConfig, out, resume: bool = False,
          mcfg: model.ModelConfig = model.ModelConfig(), verbose: bool = False) -> TrainResult:
    """Train on ``dataset``; writes ``out``, its JSON sidecar and a CSV log after every epoch."""
    if len(dataset) < cfg.batch:
        raise ConfigError(f"dataset has {len(dataset)} scenarios, fewer than batch size {cfg.batch}")
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    log_file = log_path_for(out)
    params = model.build_params(cfg.seed, mcfg)
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay, trainable=trainable_names(params, cfg))
    rows: list[dict] = []
    start = 1
    if resume and out.exists():
        loaded, meta, arrays = load_model(out, mcfg)
        # extending the epoch count is allowed; anything else changes the run
        saved = {k: v for k, v in meta["config"].items() if k != "epochs"}
        if saved != {k: v for k, v in asdict(cfg).items() if k != "epochs"}:
            raise ConfigError(f"cannot resume {out}: it was trained with a different config")
        params.load_state(loaded.state())
        opt.load_state(arrays)
        start = int(arrays["__epoch__"][0]) + 1
        rows = [r for r in read_log(log_file) if r["epoch"] < start] if log_file.exists() else []

    pool = None
    if cfg.workers > 1:
        import multiprocessing as mp

        pool = mp.get_context("fork").Pool(cfg.workers, _worker_init, (dataset, cfg, mcfg))
    cache = RasterCache(cfg)
    try:
        for epoch in range(start, cfg.epochs + 1):
            t0 = time.time()
            order = np.random.default_rng([cfg.seed, epoch, 2**31]).permutation(len(dataset))
            comps_all, gnorms = [], []
            for b0 in range(0, len(order), cfg.batch):
                idx = [int(i) for i in order[b0 : b0 + cfg.batch]]
                results = _batch_grads(idx, epoch, dataset, params, cfg, cache, mcfg, pool)
                # ordered reduction: identical sums for any worker count
                acc = None
                for _, g, comps in results:
                    comps_all.append(comps)
                    acc = {k: v.copy() for k, v in g.items()} if acc is None else {k: acc[k] + g[k] for k in acc}
                for n, p in params:
                    p.grad = acc[n] / np.float32(len(idx))
                gn = params.grad_norm()
                if not math.isfinite(gn):
                    raise NumericalError(f"non-finite gradient norm at epoch {epoch}", {"grad_norm": gn})
                gnorms.append(gn)
                opt.step()
            totals = [c["l_total"] for c in comps_all]
            row = {
                "epoch": epoch,
                "l_total": float(np.mean(totals)),
                "l_diff": float(np.mean([c["l_diff"] for c in comps_all])),
                "l_loc": float(np.mean([c["l_loc"] for c in comps_all])),
                "grad_norm": float(np.mean(gnorms)),
                "l_total_median": float(np.median(totals)),
            }
            rows.append(row)
            save_model(out, params, opt, cfg, epoch, mcfg)
            _write_log(log_file, rows)
            if verbose:
                print(f"epoch {epoch:3d}  total {row['l_total']:.4f}  diff {row['l_diff']:.4f}  "
                      f"loc {row['l_loc']:.4f}  |g| {row['grad_norm']:.3f}  ({time.time() - t0:.1f}s)",
                      file=sys.stderr, flush=True)
    finally:
        if pool is not None:
            pool.close()
            pool.join()
    return TrainResult(params, rows, out)


def _batch_grads(idx, epoch, dataset, params, cfg, cache, mcfg, pool):
    if pool is None:
        out = []
        for i in idx:
            g, comps = sample_grads(dataset[i], i, epoch, params, cfg, cache, mcfg)
            out.append((i, {k: v.copy() for k, v in g.items()}, comps))
        return out
    n = cfg.workers
    chunks = [idx[k::n] for k in range(n) if idx[k::n]]
    state = params.state()
    res = pool.map(_worker_task, [(state, epoch, c) for c in chunks])
    by_index = {i: (i, g, c) for part in res for i, g, c in part}
    return [by_index[i] for i in idx]


def env_seed(default: int = 0) -> int:
    v = os.environ.get("TRAJDEN_SEED")
    if v is None or v.strip() == "":
        return default
    try:
        return int(v)
    except ValueError:
        raise ConfigError(f"TRAJDEN_SEED must be an integer, got {v!r}") from None
