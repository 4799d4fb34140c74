"""Command-line entry point.

Every subcommand is driven by one JSON config file; flags override config
values. Exit codes follow the package error hierarchy: 0 success, 1 usage,
2 data, 3 training divergence, 4 evaluation, 5 judge.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys

from . import experiment
from .errors import KeylabError, UsageError


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad flags; route through UsageError instead
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", required=True, help="path to the experiment config JSON")
    common.add_argument("--output-dir", help="override the config's output directory")

    parser = _Parser(prog="keylab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", parents=[common], help="generate and persist the train/eval splits")

    p_train = sub.add_parser("train", parents=[common], help="train one or more strategies")
    p_train.add_argument("--strategy", help="single strategy (default: all in config)")
    p_train.add_argument("--seed", type=int, help="single seed (default: all in config)")

    p_eval = sub.add_parser("eval", parents=[common], help="evaluate trained checkpoints")
    p_eval.add_argument("--strategy", help="single strategy (default: all in config)")
    p_eval.add_argument("--seed", type=int, help="single seed (default: all in config)")
    p_eval.add_argument("--checkpoint", help="explicit checkpoint path (requires --strategy and --seed)")

    sub.add_parser("report", parents=[common], help="write the cross-strategy table and loss curves")

    p_judge = sub.add_parser("judge-test", parents=[common], help="exercise the judge protocol offline")
    p_judge.add_argument("--fixture", help="canned-verdict fixture file")

    sub.add_parser("verify", parents=[common], help="check manifest completeness and artifact hashes")
    return parser


def _selected(args, config):
    strategies = [args.strategy] if args.strategy else list(config.strategies)
    seeds = [args.seed] if args.seed is not None else list(config.seeds)
    return strategies, seeds


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        config = experiment.load_config(args.config)
        if args.output_dir:
            config = dataclasses.replace(config, output_dir=args.output_dir)

        if args.command == "gen-data":
            info = experiment.cmd_gen_data(config)
            print(f"wrote {info['counts']['train']} train / {info['counts']['eval']} eval examples")
        elif args.command == "train":
            for strategy in _selected(args, config)[0]:
                for seed in _selected(args, config)[1]:
                    entry = experiment.cmd_train(config, strategy, seed)
                    print(f"trained {strategy}/{seed} in {entry['duration_s']}s")
        elif args.command == "eval":
            strategies, seeds = _selected(args, config)
            if args.checkpoint and (len(strategies) != 1 or len(seeds) != 1):
                raise UsageError("--checkpoint requires --strategy and --seed")
            for strategy in strategies:
                for seed in seeds:
                    report = experiment.cmd_eval(config, strategy, seed, checkpoint=args.checkpoint)
                    print(
                        f"{strategy}/{seed}: acc={report.acc:.4f} fmt={report.fmt:.4f} "
                        f"score={report.score:.4f} (n={report.n})"
                    )
        elif args.command == "report":
            print(experiment.cmd_report(config), end="")
        elif args.command == "judge-test":
            checks = experiment.cmd_judge_test(config, fixture=args.fixture)
            failed = [desc for desc, ok in checks if not ok]
            for desc, ok in checks:
                print(f"{'ok' if ok else 'FAIL'}: {desc}")
            if failed:
                raise KeylabError(f"judge self-test failed: {failed}")
        elif args.command == "verify":
            problems = experiment.verify_manifest(config)
            for p in problems:
                print(p)
            if problems:
                raise KeylabError(f"{len(problems)} manifest problem(s)")
            print("manifest ok")
    except KeylabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
