"""Scenario sets on disk: manifest.json plus one directory per scenario."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .geometry import DomainError, Trajectory, read_trajectory_csv, write_trajectory_csv
from .worldgen import (
    TILE_RES,
    GenerationError,
    TRAJ_LEN,
    GpsNoiseSpec,
    MapTile,
    PolarObservation,
    Scenario,
    corrupt_gps,
    generate_gt_trajectory,
    generate_world,
    render_polar_observation,
)

GRID_MAGIC = b"TDGRID\0"
MANIFEST_FORMAT = "trajden-scenarios/1"
DEFAULT_OBS_NOISE = 0.05


def write_grid(path, grid: np.ndarray) -> None:
    g = np.ascontiguousarray(grid, dtype="<f4")
    if g.ndim != 3:
        raise DomainError(f"grid files hold (channels, rows, cols) arrays, got {g.shape}")
    header = GRID_MAGIC + struct.pack("<3I", *g.shape)
    try:
        Path(path).write_bytes(header + g.tobytes())
    except OSError as exc:
        raise OSError(f"cannot write grid file {path}: {exc}") from exc


def read_grid(path) -> np.ndarray:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read grid file {path}: {exc}") from exc
    if not data.startswith(GRID_MAGIC):
        raise DomainError(f"{path}: bad grid magic")
    c, r, k = struct.unpack_from("<3I", data, len(GRID_MAGIC))
    off = len(GRID_MAGIC) + 12
    expected = off + 4 * c * r * k
    if len(data) != expected:
        raise DomainError(f"{path}: expected {expected} bytes, found {len(data)}")
    return np.frombuffer(data, dtype="<f4", offset=off).reshape(c, r, k).astype(np.float32)


def _quantize(traj: Trajectory) -> Trajectory:
    # match the 9-significant-digit CSV text so reloads compare equal
    q = np.vectorize(lambda v: float(f"{v:.9g}"))
    return Trajectory(traj.t, q(traj.xy), q(traj.theta))


def scenario_seeds(root_seed: int, n: int) -> list[int]:
    children = np.random.SeedSequence(int(root_seed)).spawn(n)
    return [int(c.generate_state(1, dtype=np.uint64)[0]) for c in children]


def generate_scenario(seed: int, noise: GpsNoiseSpec, obs_noise: float = DEFAULT_OBS_NOISE,
                      scenario_id: str = "", split: str = "train") -> Scenario:
    traj_ss, gps_ss, obs_ss = np.random.SeedSequence(int(seed)).spawn(3)
    world = generate_world(seed)
    gt = _quantize(generate_gt_trajectory(world, int(traj_ss.generate_state(1)[0])))
    gps = _quantize(corrupt_gps(gt, noise, np.random.default_rng(gps_ss)))
    q = len(gps) - 1
    tile, _ = world.rasterize(gps.xy[q])
    obs = render_polar_observation(tile, gt.pose(q), obs_noise, rng=np.random.default_rng(obs_ss))
    return Scenario(tile, gt, gps, obs, int(seed), scenario_id, split)


def _generate_with_fallback(root_seed: int, i: int, s: int, noise: GpsNoiseSpec, obs_noise: float,
                            split: str, tries: int = 8) -> Scenario:
    # a world without a feasible drive gets a fresh, derived seed; the manifest keeps the one used
    for k in range(tries):
        try:
            return generate_scenario(s, noise, obs_noise, f"s{i:05d}", split)
        except GenerationError:
            s = int(np.random.SeedSequence([int(root_seed), i, k + 1]).generate_state(1, dtype=np.uint64)[0])
    raise GenerationError(f"scenario {i}: no feasible world after {tries} seeds")


def generate_dataset(n: int, noise: GpsNoiseSpec | None = None, seed: int = 0, out_dir=None,
                     eval_fraction: float = 0.2, obs_noise: float = DEFAULT_OBS_NOISE):
    """Generate ``n`` scenarios; the last ``round(n * eval_fraction)`` form the eval split."""
    if n < 1:
        raise DomainError(f"dataset size must be >= 1, got {n}")
    noise = noise if noise is not None else GpsNoiseSpec(seed=seed)
    seeds = scenario_seeds(seed, n)
    n_eval = int(round(n * eval_fraction))
    scenarios = []
    for i, s in enumerate(seeds):
        split = "eval" if i >= n - n_eval else "train"
        scenarios.append(_generate_with_fallback(seed, i, s, noise, obs_noise, split))
    manifest = {
        "format": MANIFEST_FORMAT,
        "root_seed": int(seed),
        "params": {
            "noise": asdict(noise),
            "obs_noise": obs_noise,
            "traj_len": TRAJ_LEN,
            "tile_resolution": TILE_RES,
            "eval_fraction": eval_fraction,
        },
        "scenarios": [_entry(sc) for sc in scenarios],
    }
    if out_dir is not None:
        write_dataset(out_dir, scenarios, manifest)
    return scenarios, manifest


def _entry(sc: Scenario) -> dict:
    return {"id": sc.scenario_id, "seed": sc.seed, "split": sc.split, "tile_origin": list(sc.tile.origin)}


def write_dataset(out_dir, scenarios: list[Scenario], manifest: dict) -> None:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        for sc in scenarios:
            d = out / sc.scenario_id
            d.mkdir(exist_ok=True)
            write_grid(d / "tile.bin", sc.tile.grid)
            write_grid(d / "obs.bin", sc.obs.grid)
            write_trajectory_csv(sc.gt_traj, d / "gt.csv")
            write_trajectory_csv(sc.gps_traj, d / "gps.csv")
            (d / "scenario.json").write_text(json.dumps(_entry(sc), indent=2, sort_keys=True) + "\n")
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write scenario set under {out}: {exc}") from exc


def read_manifest(data_dir) -> dict:
    path = Path(data_dir) / "manifest.json"
    try:
        manifest = json.loads(path.read_text())
    except OSError as exc:
        raise OSError(f"cannot read manifest {path}: {exc}") from exc
    if manifest.get("format") != MANIFEST_FORMAT:
        raise DomainError(f"{path}: unsupported manifest format {manifest.get('format')!r}")
    return manifest


def load_scenario(data_dir, entry: dict) -> Scenario:
    d = Path(data_dir) / entry["id"]
    res = TILE_RES
    tile = MapTile(tuple(entry["tile_origin"]), read_grid(d / "tile.bin"), res)
    gt = read_trajectory_csv(d / "gt.csv")
    gps = read_trajectory_csv(d / "gps.csv")
    obs = PolarObservation(read_grid(d / "obs.bin"), gt.pose(len(gt) - 1))
    return Scenario(tile, gt, gps, obs, int(entry["seed"]), entry["id"], entry.get("split", "train"))


def load_scenario_dir(path) -> Scenario:
    """Load one scenario from its directory (or the ``scenario.json`` inside it)."""
    path = Path(path)
    d = path.parent if path.is_file() else path
    try:
        entry = json.loads((d / "scenario.json").read_text())
    except OSError as exc:
        raise OSError(f"cannot read scenario descriptor in {d}: {exc}") from exc
    return load_scenario(d.parent, {**entry, "id": d.name})


def read_dataset(data_dir, split: str | None = None) -> list[Scenario]:
    """Load a scenario set; ``split`` of None or "all" loads every scenario."""
    manifest = read_manifest(data_dir)
    entries = manifest["scenarios"]
    if split not in (None, "all"):
        entries = [e for e in entries if e.get("split") == split]
    return [load_scenario(data_dir, e) for e in entries]
