"""Command-line entry point: ``voxwalk <subcommand> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from ..voxelizer import grid_to_bytes, voxelize
from .benchmark import run_benchmark
from .config import Config
from .generate import read_molecule, run_evaluate, run_generate
from .training import run_gen_data, run_training


def _steps(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"steps must be comma-separated integers: {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="voxwalk", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key = value config file")
    common.add_argument("--seed", type=int, help="master rng seed (overrides the config)")
    common.add_argument("--work-dir", help="directory for datasets and checkpoints")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="write the toy training set")
    p.add_argument("--out", type=Path)

    p = sub.add_parser("voxelize", parents=[common], help="voxelize one molecule")
    p.add_argument("input", type=Path)
    p.add_argument("--out", type=Path, required=True)

    sub.add_parser("train-vqvae", parents=[common], help="train the compression model")
    sub.add_parser("train-dae", parents=[common], help="train the latent denoiser")

    p = sub.add_parser("sample", parents=[common], help="seeded walk-jump generation")
    p.add_argument("--seed-file", type=Path, required=True)
    p.add_argument("--steps", type=_steps, default=[10])
    p.add_argument("--chains", type=int, default=1)
    p.add_argument("--out", type=Path)

    p = sub.add_parser("evaluate", parents=[common], help="score a generated library")
    p.add_argument("--library", type=Path, required=True)
    p.add_argument("--seed-file", type=Path, required=True)
    p.add_argument("--reference", type=Path)
    p.add_argument("--out", type=Path)

    p = sub.add_parser("benchmark", parents=[common], help="latent vs voxel walk cost")
    p.add_argument("--steps", type=int, default=3)
    p.add_argument("--out", type=Path)
    return parser


def load_config(args) -> Config:
    config = Config.load(args.config) if args.config else Config()
    changes = {}
    if args.seed is not None:
        changes["master_seed"] = args.seed
    if args.work_dir is not None:
        changes["work_dir"] = args.work_dir
    return config.replace(**changes) if changes else config


def run(args) -> dict:
    config = load_config(args)
    cmd = args.command
    if cmd == "gen-data":
        return {"dataset": str(run_gen_data(config, args.out))}
    if cmd == "voxelize":
        grid = voxelize(read_molecule(args.input).molecule, config.grid_spec)
        args.out.write_bytes(grid_to_bytes(grid))
        return {"grid": str(args.out)}
    if cmd == "train-vqvae":
        return {"checkpoint": str(run_training("vqvae", config))}
    if cmd == "train-dae":
        return {"checkpoint": str(run_training("dae", config))}
    if cmd == "sample":
        if args.chains < 1:
            raise ValueError("--chains must be at least 1")
        return {"library": str(run_generate(config, args.seed_file, args.steps, args.chains,
                                            args.out))}
    if cmd == "evaluate":
        report = run_evaluate(config, args.library, args.seed_file, args.reference, args.out)
        sys.stdout.write(report.to_table())
        return {"metrics": str((args.out or args.library) / "metrics.json")}
    if cmd == "benchmark":
        report = run_benchmark(config, args.steps)
        if args.out:
            args.out.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
        return report
    raise ValueError(f"unknown command {cmd!r}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = run(args)
    except Exception as exc:  # reported as one machine-readable line
        print(json.dumps({"error": type(exc).__name__, "message": str(exc),
                          "command": args.command}), file=sys.stderr)
        return 1
    print(json.dumps({"ok": True, **result}, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
