"""Command-line entry point: ``sparseskip run|search <config.json>``.

Exit codes: 0 on success, 2 on a config error, 3 when any repeat tripped the
divergence guard (outputs are still written in that case).
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace

from .runner import ConfigError, parse_config, resolve_output_dir, run_search, run_single

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sparseskip",
        description="Deterministic federated sparse-training experiment runner.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in (("run", "execute one configuration"),
                       ("search", "random hyperparameter search over gamma and 1/p")):
        cmd = sub.add_parser(name, help=text)
        cmd.add_argument("config", help="path to a JSON experiment config")
        cmd.add_argument("--out", default=None, help="output directory (overrides config and env)")
        cmd.add_argument("--seed", type=int, default=None, help="base seed (overrides config)")
        cmd.add_argument("--threads", type=int, default=1,
                         help="parallel repeats / search candidates")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = parse_config(args.config)
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        out = resolve_output_dir(cfg, args.out)
        if args.command == "search":
            summary, table = run_search(cfg, out, threads=args.threads)
            best = summary.best_hyperparameters
            print(f"search: {len(table)} candidates -> best gamma={best['gamma']:.6g} "
                  f"1/p={best['inv_p']} mean_test_metric={summary.mean_test_metric:.6g}")
        else:
            summary = run_single(cfg, out, threads=args.threads)
            print(f"run: mean_test_metric={summary.mean_test_metric:.6g} "
                  f"stderr={summary.stderr_test_metric:.3g} repeats={cfg.repeats}")
        print(f"outputs written to {out}")
    except (ConfigError, FileNotFoundError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    if summary.any_diverged:
        print("warning: at least one repeat was divergence-flagged", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
