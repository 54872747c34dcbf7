"""Command-line entry point: run / theory / sweep subcommands."""
from __future__ import annotations

import argparse
import sys

from .config import ConfigError, parse_config
from .runner import run_single, run_sweep, run_theory


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedharden",
        description="Deterministic federated-learning backdoor attack/defense "
                    "simulator with executable robustness bounds.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("run", "run one federation experiment"),
        ("theory", "run the two-client bound-check harness"),
        ("sweep", "run the configured sweep lists"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON config path ('-' for stdin)")
        p.add_argument("--preset", help="named preset to start from")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--threads", type=int, help="parallel client updates")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = parse_config(args.config, preset=args.preset)
        if args.seed is not None:
            cfg.raw["seed"] = args.seed
        if args.threads is not None:
            cfg.raw["federation"]["threads"] = args.threads
        if args.command == "run":
            summary = run_single(cfg, args.out)
            print(f"run complete: acc={summary['final']['acc']:.4f} "
                  f"asr={summary['final']['asr']:.4f} -> {args.out}")
        elif args.command == "theory":
            payload = run_theory(cfg, args.out)
            print(f"theory harness complete: bound violations "
                  f"bd={payload['bound_violations_bd']} "
                  f"clean={payload['bound_violations_clean']} -> {args.out}")
        else:
            run_sweep(cfg, args.out)
            print(f"sweep complete -> {args.out}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
