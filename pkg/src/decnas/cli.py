"""Command line: ``decnas run-search | run-baseline | fl-tune | report``.

Exit codes: 0 success, 1 missing artifacts or other failure, 2 config
error, 3 infeasible budget.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import config, experiment
from .pruner import BudgetInfeasible

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_BUDGET = 0, 1, 2, 3


def _factors(text: str) -> tuple[float, ...]:
    try:
        return config._factors(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="decnas", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, needs_config=True):
        sp.add_argument("--config", required=needs_config, help="run configuration file")
        sp.add_argument("--seed", type=int, help="override [run] seed")
        sp.add_argument("--threads", type=int, help="override [run] threads")
        sp.add_argument("--out", help="output directory (overrides [run] output_dir)")

    common(sub.add_parser("run-search", help="pretrain, search, FL-tune and write artifacts"))
    sp = sub.add_parser("run-baseline", help="append width-multiplier rows to frontier.csv")
    common(sp)
    sp.add_argument("--factors", type=_factors, help="comma-separated width factors in (0, 1]")
    sp = sub.add_parser("fl-tune", help="FedAvg-tune a saved model or a fresh seed model")
    common(sp)
    sp.add_argument("--model", help=".npz snapshot from a run's models/ directory")
    sp.add_argument("--rounds", type=int, help="override [run] fl_tune_rounds")
    sp = sub.add_parser("report", help="print a summary and write frontier.svg")
    sp.add_argument("run_dir", help="directory written by run-search")
    return p


def _load(args) -> tuple[config.RunConfig, Path]:
    cfg = config.load(args.config)
    if args.seed is not None:
        cfg.set("run", "seed", args.seed)
    if args.threads is not None:
        if args.threads < 1:
            raise config.ConfigError("--threads must be >= 1")
        cfg.set("run", "threads", args.threads)
    out = Path(args.out or cfg.get("run", "output_dir"))
    return cfg, out


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            sys.stdout.write(experiment.report(Path(args.run_dir)))
            return EXIT_OK
        cfg, out = _load(args)
        if args.command == "run-search":
            doc = experiment.run_search(cfg, out)
            print(f"{len(doc['iterations'])} iterations; artifacts in {out}")
        elif args.command == "run-baseline":
            for r in experiment.run_baseline(cfg, out, args.factors):
                print(f"width_multiplier macs={r.macs} ratio={r.macs_ratio:.4f} top1={r.top1_accuracy:.4f}")
        elif args.command == "fl-tune":
            print(json.dumps(experiment.run_fl_tune(cfg, out, args.model, args.rounds), sort_keys=True))
    except config.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except BudgetInfeasible as exc:
        print(f"infeasible budget: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
