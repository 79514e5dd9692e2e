"""Command-line entry point: gen, train, eval, denoise, ablate, selftest.

Exit codes: 0 success, 2 configuration error, 3 numerical failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from dataclasses import asdict, replace
from pathlib import Path


EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


def _print_config(command: str, cfg: dict) -> None:
    print(f"# trajden {command}: resolved config")
    for k in sorted(cfg):
        v = cfg[k]
        print(f"{k} = {json.dumps(v) if isinstance(v, (dict, list)) else v}")
    sys.stdout.flush()


def _seed(arg):
    from .trainer import env_seed

    return arg if arg is not None else env_seed(0)


def cmd_gen(a) -> int:
    from .dataset import generate_dataset
    from .worldgen import NOISE_PRESETS, GpsNoiseSpec

    if a.noise_preset not in NOISE_PRESETS:
        raise _ConfigError(f"unknown noise preset {a.noise_preset!r}; choose from {sorted(NOISE_PRESETS)}")
    seed = _seed(a.seed)
    noise = GpsNoiseSpec(**NOISE_PRESETS[a.noise_preset], seed=seed)
    _print_config("gen", {"out": str(a.out), "n": a.n, "seed": seed, "noise_preset": a.noise_preset,
                          "noise": asdict(noise), "eval_fraction": a.eval_fraction, "obs_noise": a.obs_noise})
    scns, _ = generate_dataset(a.n, noise, seed, a.out, a.eval_fraction, a.obs_noise)
    n_eval = sum(s.split == "eval" for s in scns)
    print(f"wrote {len(scns)} scenarios ({len(scns) - n_eval} train, {n_eval} eval) to {a.out}")
    return EXIT_OK


def cmd_train(a) -> int:
    from .dataset import read_dataset
    from .trainer import TrainConfig, train

    overrides = {"ablation_mode": a.ablation, "workers": a.workers, "seed": a.seed, "epochs": a.epochs}
    text = ""
    if a.config is not None:
        try:
            text = a.config.read_text()
        except OSError as exc:
            raise OSError(f"cannot read config {a.config}: {exc}") from exc
    cfg = TrainConfig.from_text(text, **overrides)
    # precedence: --seed, then the config file, then TRAJDEN_SEED
    if a.seed is None and not any(l.split("#")[0].split("=")[0].strip() == "seed" for l in text.splitlines()):
        cfg = replace(cfg, seed=_seed(None))
    _print_config("train", {**asdict(cfg), "data": str(a.data), "out": str(a.out), "resume": a.resume})
    data = read_dataset(a.data, "train")
    res = train(data, cfg, a.out, resume=a.resume, verbose=True)
    last = res.log[-1] if res.log else None
    if last:
        print(f"finished epoch {last['epoch']}: l_total {last['l_total']:.4f}")
    print(f"checkpoint {res.checkpoint}")
    return EXIT_OK


def cmd_eval(a) -> int:
    from .evalkit import format_table, run_eval

    seed = _seed(a.seed)
    _print_config("eval", {"data": str(a.data), "ckpt": str(a.ckpt) if a.ckpt else None, "mode": a.mode,
                           "report": str(a.report), "seed": seed, "split": a.split})
    if a.mode != "raw_gps" and a.ckpt is None:
        raise _ConfigError(f"--mode {a.mode} requires --ckpt")
    rep = run_eval(a.data, a.ckpt, a.mode, a.report, seed=seed, split=a.split)
    print(format_table([rep]))
    return EXIT_OK


def cmd_denoise(a) -> int:
    from .dataset import load_scenario_dir
    from .evalkit import emit_plot, estimate_pose
    from .geometry import relative_errors
    from .trainer import load_model

    seed = _seed(a.seed)
    _print_config("denoise", {"scenario": str(a.scenario), "ckpt": str(a.ckpt), "plot": str(a.plot), "seed": seed})
    scn = load_scenario_dir(a.scenario)
    params, _, _ = load_model(a.ckpt)
    pose, traj = estimate_pose(scn, "full", params, seed, 0)
    gt = scn.gt_pose
    lat, lon, ang = relative_errors(pose, gt)
    print(f"estimate x={pose.x:.3f} y={pose.y:.3f} theta={pose.theta:.4f}")
    print(f"ground truth x={gt.x:.3f} y={gt.y:.3f} theta={gt.theta:.4f}")
    print(f"errors position={math.hypot(pose.x - gt.x, pose.y - gt.y):.3f} m lateral={lat:.3f} m "
          f"longitudinal={lon:.3f} m orientation={math.degrees(ang):.3f} deg")
    if a.plot is not None:
        emit_plot(scn, traj, a.plot)
        print(f"plot {a.plot}")
    return EXIT_OK


def cmd_ablate(a) -> int:
    from .evalkit import ablate, format_table

    seed = _seed(a.seed)
    _print_config("ablate", {"data": str(a.data), "ckpt_full": str(a.ckpt_full), "ckpt_noref": str(a.ckpt_noref),
                             "report": str(a.report), "seed": seed, "split": a.split})
    reps = ablate(a.data, a.ckpt_full, a.ckpt_noref, a.report, seed=seed, split=a.split)
    print(format_table(reps))
    return EXIT_OK


def cmd_selftest(a) -> int:
    from .selftest import run_all

    _print_config("selftest", {"full": a.full})
    results = run_all(quick=not a.full)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name}  {r.detail}")
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return EXIT_OK if failed == 0 else 1


class _ConfigError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="trajden", description="Map-conditioned GPS trajectory denoising toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a scenario set")
    g.add_argument("--out", type=Path, required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--noise-preset", default="default")
    g.add_argument("--eval-fraction", type=float, default=0.2)
    g.add_argument("--obs-noise", type=float, default=0.05)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--data", type=Path, required=True)
    t.add_argument("--out", type=Path, required=True)
    t.add_argument("--config", type=Path)
    t.add_argument("--ablation", choices=("full", "no_refinement", "no_loc"))
    t.add_argument("--workers", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--resume", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate one mode")
    e.add_argument("--data", type=Path, required=True)
    e.add_argument("--ckpt", type=Path)
    e.add_argument("--mode", choices=("full", "no_refinement", "raw_gps"), default="full")
    e.add_argument("--report", type=Path, required=True)
    e.add_argument("--seed", type=int)
    e.add_argument("--split", choices=("eval", "train", "all"), default="eval")
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("denoise", help="localize one scenario and plot it")
    d.add_argument("--scenario", type=Path, required=True)
    d.add_argument("--ckpt", type=Path, required=True)
    d.add_argument("--plot", type=Path)
    d.add_argument("--seed", type=int)
    d.set_defaults(func=cmd_denoise)

    b = sub.add_parser("ablate", help="full vs matcher-only vs raw GPS")
    b.add_argument("--data", type=Path, required=True)
    b.add_argument("--ckpt-full", type=Path, required=True)
    b.add_argument("--ckpt-noref", type=Path, required=True)
    b.add_argument("--report", type=Path, required=True)
    b.add_argument("--seed", type=int)
    b.add_argument("--split", choices=("eval", "train", "all"), default="eval")
    b.set_defaults(func=cmd_ablate)

    s = sub.add_parser("selftest", help="run the oracle and invariant checks")
    s.add_argument("--full", action="store_true", help="acceptance-sized checks (slower)")
    s.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    from .diffusion import NumericalError
    from .geometry import DomainError

    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (_ConfigError, DomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        diag = getattr(exc, "diagnostics", None)
        if diag:
            print(json.dumps(diag, default=str), file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
