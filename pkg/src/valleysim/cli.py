"""Command line interface: one subcommand per experiment kind."""

from __future__ import annotations

import argparse
import os
import sys

from .harness import EXPERIMENTS, run


def _default_threads() -> int:
    env = os.environ.get("VALLEYSIM_THREADS")
    if env is not None:
        try:
            return max(1, int(env))
        except ValueError:
            print(f"error: VALLEYSIM_THREADS={env!r} is not an integer",
                  file=sys.stderr)
            raise SystemExit(1)
    return None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="valleysim",
        description="Stochastic heat equation laboratory: simulation, "
                    "statistics, and scaling experiments on a truncated line.")
    sub = parser.add_subparsers(dest="experiment", required=True)
    for name in EXPERIMENTS:
        p = sub.add_parser(name, help=f"run the {name} experiment")
        p.add_argument("--config", required=True, help="JSON config path")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None,
                       help="override master_seed from the config")
        p.add_argument("--replicas", type=int, default=None,
                       help="override n_replicas from the config")
        p.add_argument("--threads", type=int, default=None,
                       help="worker processes (VALLEYSIM_THREADS overrides; "
                            "default: available parallelism)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    threads = _default_threads()
    if threads is None:
        threads = args.threads if args.threads else (os.cpu_count() or 1)
    status = run(args.config, args.out, experiment=args.experiment,
                 master_seed=args.seed, n_replicas=args.replicas,
                 n_workers=max(1, threads))
    return status


if __name__ == "__main__":
    raise SystemExit(main())
