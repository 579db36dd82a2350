"""Command-line entry points for the assimilation pipeline."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import experiments as exp


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", required=True, help="experiment config file")
    parser.add_argument("--out-dir", required=True, help="run output directory")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--workers", type=int, default=1, help="worker processes")
    parser.add_argument("--resume", action="store_true", help="continue from the last checkpoint")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="saltda",
        description="Twin and imperfect-model data assimilation for 2D Euler flows",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_text in [
        ("spinup", "integrate the fine model to equilibrium, store snapshots"),
        ("calibrate-xi", "fit the noise basis from spin-up snapshots"),
        ("calibrate-noise", "fit station observation noise from snapshots"),
        ("init-ensemble", "draw the initial ensemble by deformation"),
        ("truth", "generate the verification trajectory"),
        ("assimilate", "run the particle filter over all windows"),
        ("diagnose", "summarize a finished assimilation run"),
    ]:
        p = sub.add_parser(name, help=help_text)
        _add_common(p)

    p = sub.add_parser("forecast", help="free forecast from a checkpointed posterior")
    _add_common(p)
    p.add_argument("--start-window", type=int, required=True)
    p.add_argument("--horizon", type=int, required=True)

    p = sub.add_parser("kalman-check", help="filter-vs-Kalman benchmark on a toy model")
    p.add_argument("--particles", type=int, default=10_000)
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--seed", type=int, default=20)

    p = sub.add_parser("run-all", help="run the whole pipeline in order")
    _add_common(p)
    return parser


def _load_config(args) -> exp.ExperimentConfig:
    return exp.parse_config(args.config, seed_override=args.seed)


def _emit(result) -> None:
    print(json.dumps(result, indent=2, sort_keys=True, default=str))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)

    if args.command == "kalman-check":
        result = exp.run_kalman_check(args.particles, args.steps, args.seed)
        _emit(result)
        return 0 if result["mean_ok"] and result["var_ok"] else 1

    cfg = _load_config(args)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if args.command == "spinup":
        _emit(exp.run_spinup(cfg, out_dir))
    elif args.command == "calibrate-xi":
        _emit(exp.run_calibrate_xi(cfg, out_dir))
    elif args.command == "calibrate-noise":
        _emit(exp.run_calibrate_noise(cfg, out_dir))
    elif args.command == "init-ensemble":
        _emit(exp.run_init_ensemble(cfg, out_dir))
    elif args.command == "truth":
        _emit(exp.run_truth(cfg, out_dir))
    elif args.command == "assimilate":
        records = exp.run_assimilation(cfg, out_dir, workers=args.workers, resume=args.resume)
        _emit({"windows": len(records) - 1, "out": str(exp._assim_dir(out_dir))})
    elif args.command == "diagnose":
        _emit(exp.run_diagnose(cfg, out_dir))
    elif args.command == "forecast":
        curves = exp.run_forecast(cfg, out_dir, args.start_window, args.horizon)
        _emit({"points": len(curves)})
    elif args.command == "run-all":
        _emit(exp.run_spinup(cfg, out_dir))
        _emit(exp.run_calibrate_xi(cfg, out_dir))
        _emit(exp.run_calibrate_noise(cfg, out_dir))
        _emit(exp.run_init_ensemble(cfg, out_dir))
        _emit(exp.run_truth(cfg, out_dir))
        records = exp.run_assimilation(cfg, out_dir, workers=args.workers)
        _emit({"windows": len(records) - 1})
        _emit(exp.run_diagnose(cfg, out_dir))
    else:  # pragma: no cover
        raise AssertionError(args.command)
    return 0


if __name__ == "__main__":
    sys.exit(main())
