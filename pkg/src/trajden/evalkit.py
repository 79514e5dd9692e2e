"""Recall metrics, evaluation modes, the ablation table and SVG trajectory plots."""

from __future__ import annotations

import base64
import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import matcher, model
from .autodiff import ParamStore
from .dataset import read_dataset, read_manifest
from .diffusion import build_schedule, sample_pose
from .geometry import DomainError, Pose, Trajectory, relative_errors
from .trainer import load_model
from .worldgen import Scenario

EVAL_MODES = ("full", "no_refinement", "raw_gps")
LATERAL_M = (1, 3, 5)
LONGITUDINAL_M = (1, 3, 5)
ORIENTATION_DEG = (1, 3, 5)
POSITION_M = (1, 2, 5, 10)
METHOD_LABELS = {"full": "full", "no_refinement": "w/o refinement", "raw_gps": "raw gps"}


def _recall(errors: np.ndarray, thresholds) -> dict[str, float]:
    return {str(t): float(np.mean(errors <= t)) for t in thresholds}


@dataclass
class MetricsReport:
    method: str
    dataset_id: str
    n: int
    lateral: dict[str, float]
    longitudinal: dict[str, float]
    orientation: dict[str, float]
    position: dict[str, float]
    rows: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "dataset_id": self.dataset_id,
            "n": self.n,
            "recall": {
                "lateral_m": self.lateral,
                "longitudinal_m": self.longitudinal,
                "orientation_deg": self.orientation,
                "position_m": self.position,
            },
            "rows": self.rows,
        }

    def summary_row(self) -> dict:
        row = {"method": self.method, "dataset_id": self.dataset_id, "n": self.n}
        for name, rec in (("lat", self.lateral), ("lon", self.longitudinal), ("ori", self.orientation),
                          ("pos", self.position)):
            row.update({f"{name}@{k}": v for k, v in rec.items()})
        return row


def compute_metrics(pairs, method: str = "", dataset_id: str = "", ids=None) -> MetricsReport:
    """Recall at fixed thresholds from (estimate, ground truth) pose pairs."""
    pairs = list(pairs)
    if not pairs:
        raise DomainError("compute_metrics needs at least one (estimate, gt) pair")
    ids = list(ids) if ids is not None else [str(i) for i in range(len(pairs))]
    lat, lon, ang, pos, rows = [], [], [], [], []
    for sid, (est, gt) in zip(ids, pairs):
        la, lo, an = relative_errors(est, gt)
        p = math.hypot(est.x - gt.x, est.y - gt.y)
        deg = math.degrees(an)
        lat.append(la)
        lon.append(lo)
        ang.append(deg)
        pos.append(p)
        rows.append({"id": sid, "lateral_m": la, "longitudinal_m": lo, "orientation_deg": deg, "position_m": p,
                     "estimate": [est.x, est.y, est.theta], "gt": [gt.x, gt.y, gt.theta]})
    return MetricsReport(
        method, dataset_id, len(pairs),
        _recall(np.array(lat), LATERAL_M),
        _recall(np.array(lon), LONGITUDINAL_M),
        _recall(np.array(ang), ORIENTATION_DEG),
        _recall(np.array(pos), POSITION_M),
        rows,
    )


# ----------------------------------------------------------------------------
# evaluation


def _scenarios(data, split: str) -> tuple[list[Scenario], str]:
    if isinstance(data, (str, Path)):
        manifest = read_manifest(data)
        scns = read_dataset(data, split)
        return scns, f"{Path(data).name}:root_seed={manifest['root_seed']}:{split}"
    return list(data), "in-memory"


def estimate_pose(scn: Scenario, mode: str, params: ParamStore | None, seed: int = 0, index: int = 0,
                  mcfg: model.ModelConfig = model.ModelConfig()) -> tuple[Pose, Trajectory | None]:
    q = scn.query_index
    if mode == "raw_gps":
        return scn.gps_traj.pose(q), scn.gps_traj
    if params is None:
        raise DomainError(f"mode {mode!r} needs a checkpoint")
    sample = model.sample_from_scenario(scn)
    fw = model.forward(sample, params, mcfg)
    if mode == "no_refinement":
        return matcher.belief_from_scores(fw.S, fw.origin, model.CELL).pose, None
    rng = np.random.default_rng([seed, index])
    traj, pose = sample_pose(scn.gps_traj, fw.cond, params, _SCHEDULE, sample.box, rng, mcfg.denoiser)
    return pose, traj


_SCHEDULE = build_schedule()


def run_eval(data, checkpoint=None, mode: str = "full", report_path=None, seed: int = 0, split: str = "eval",
             params: ParamStore | None = None) -> MetricsReport:
    """Evaluate one mode on a scenario set (a directory or a list of scenarios)."""
    if mode not in EVAL_MODES:
        raise DomainError(f"mode must be one of {EVAL_MODES}, got {mode!r}")
    if mode != "raw_gps" and params is None:
        if checkpoint is None:
            raise DomainError(f"mode {mode!r} needs a checkpoint")
        params, _, _ = load_model(checkpoint)
    scns, dataset_id = _scenarios(data, split)
    if not scns:
        raise DomainError(f"no scenarios in split {split!r}")
    pairs = []
    for i, scn in enumerate(scns):
        est, _ = estimate_pose(scn, mode, params if mode != "raw_gps" else None, seed, i)
        pairs.append((est, scn.gt_pose))
    report = compute_metrics(pairs, METHOD_LABELS[mode], dataset_id, [s.scenario_id for s in scns])
    if report_path is not None:
        write_reports([report], report_path)
    return report


def write_reports(reports: list[MetricsReport], path) -> tuple[Path, Path]:
    """JSON with every report in full, plus a CSV summary next to it (one row per method)."""
    path = Path(path)
    csv_path = path.with_suffix(".csv")
    payload = reports[0].to_dict() if len(reports) == 1 else {"reports": [r.to_dict() for r in reports]}
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        rows = [r.summary_row() for r in reports]
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
        csv_path.write_text(buf.getvalue())
    except OSError as exc:
        raise OSError(f"cannot write report {path}: {exc}") from exc
    return path, csv_path


def ablate(data, ckpt_full, ckpt_noref, report_path=None, seed: int = 0, split: str = "eval") -> list[MetricsReport]:
    """Rows: full model, matcher-only model, raw GPS."""
    reports = [
        run_eval(data, ckpt_full, "full", seed=seed, split=split),
        run_eval(data, ckpt_noref, "no_refinement", seed=seed, split=split),
        run_eval(data, None, "raw_gps", seed=seed, split=split),
    ]
    if report_path is not None:
        write_reports(reports, report_path)
    return reports


def format_table(reports: list[MetricsReport]) -> str:
    head = f"{'method':<16}" + "".join(f"{'pos@' + k + 'm':>9}" for k in map(str, POSITION_M))
    head += "".join(f"{'lat@' + str(k):>8}" for k in LATERAL_M) + "".join(f"{'ori@' + str(k):>8}" for k in ORIENTATION_DEG)
    lines = [head]
    for r in reports:
        line = f"{r.method:<16}" + "".join(f"{r.position[str(k)]:>9.3f}" for k in POSITION_M)
        line += "".join(f"{r.lateral[str(k)]:>8.3f}" for k in LATERAL_M)
        line += "".join(f"{r.orientation[str(k)]:>8.3f}" for k in ORIENTATION_DEG)
        lines.append(line)
    return "\n".join(lines)


# ----------------------------------------------------------------------------
# plotting

_COLORS = {"road": (150, 150, 150), "building": (90, 90, 110), "vegetation": (160, 205, 150)}
TRACE_COLORS = {"gt": "red", "gps": "blue", "generated": "green"}


def _tile_png(grid: np.ndarray) -> bytes:
    g = np.clip(np.asarray(grid, dtype=np.float64), 0, 1)
    rgb = np.full(g.shape[1:] + (3,), 255.0)
    for ch, key in enumerate(("road", "building", "vegetation")):
        a = g[ch][..., None]
        rgb = rgb * (1 - a) + np.array(_COLORS[key]) * a
    # row 0 is the southern edge; images start at the top
    img = Image.fromarray(np.round(rgb[::-1]).astype(np.uint8), "RGB")
    buf = io.BytesIO()
    img.save(buf, format="PNG", optimize=False)
    return buf.getvalue()


def emit_plot(scn: Scenario, generated: Trajectory | None, path, query_radius: float = 5.0) -> Path:
    """SVG with the map tile underneath gt (red), GPS (blue) and generated (green) polylines."""
    tile = scn.tile
    w, h = tile.extent
    x0, y0 = tile.origin
    traces = [("gt", scn.gt_traj), ("gps", scn.gps_traj)]
    if generated is not None:
        traces.append(("generated", generated))
    xs = np.concatenate([[x0, x0 + w]] + [t.xy[:, 0] for _, t in traces])
    ys = np.concatenate([[y0, y0 + h]] + [t.xy[:, 1] for _, t in traces])
    pad = 4.0
    vx0, vx1 = float(xs.min()) - pad, float(xs.max()) + pad
    vy0, vy1 = float(ys.min()) - pad, float(ys.max()) + pad

    def sx(x):
        return x - vx0

    def sy(y):
        return vy1 - y

    png = base64.b64encode(_tile_png(tile.grid)).decode("ascii")
    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" xmlns:xlink="http://www.w3.org/1999/xlink" '
        f'width="{(vx1 - vx0) * 4:.0f}" height="{(vy1 - vy0) * 4:.0f}" viewBox="0 0 {vx1 - vx0:.3f} {vy1 - vy0:.3f}">',
        f'<title>{scn.scenario_id or "scenario"}</title>',
        f'<rect x="0" y="0" width="{vx1 - vx0:.3f}" height="{vy1 - vy0:.3f}" fill="white"/>',
        f'<image id="map" x="{sx(x0):.3f}" y="{sy(y0 + h):.3f}" width="{w:.3f}" height="{h:.3f}" '
        f'preserveAspectRatio="none" xlink:href="data:image/png;base64,{png}"/>',
    ]
    q = scn.gt_pose
    out.append(f'<circle id="query" cx="{sx(q.x):.3f}" cy="{sy(q.y):.3f}" r="{query_radius:.3f}" '
               f'fill="yellow" fill-opacity="0.35" stroke="orange" stroke-width="0.5"/>')
    for name, traj in traces:
        pts = " ".join(f"{sx(x):.3f},{sy(y):.3f}" for x, y in traj.xy)
        out.append(f'<polyline id="{name}" points="{pts}" fill="none" stroke="{TRACE_COLORS[name]}" '
                   f'stroke-width="0.8" stroke-linejoin="round"/>')
    out.append("</svg>")
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(out) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write plot {path}: {exc}") from exc
    return path
