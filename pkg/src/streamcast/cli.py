"""Command line: ``streamcast <subcommand> [--config PATH] [--seed N] [--out DIR] [--threads N]``."""
from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace

from . import experiment as ex
from .checkpoint import CheckpointError
from .config import ConfigError, ExperimentConfig, load_config
from .scenario import ScenarioError
from .streaming import ScheduleError
from .training import TrainingError

EXIT_CONFIG = 2
EXIT_DATA = 3

log = logging.getLogger("streamcast")


def _common(parser: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=d, help="JSON experiment config")
    parser.add_argument("--seed", type=int, default=d, help="seed (overrides the config's seed list)")
    parser.add_argument("--out", default=d, help="output directory")
    parser.add_argument("--threads", type=int, default=d, help="episode-level evaluation threads")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="streamcast", description="Streaming trajectory prediction experiments")
    _common(p, suppress=False)
    sub = p.add_subparsers(dest="command", required=True)
    helps = {
        "gen-data": "generate train/eval episode files",
        "train-base": "train the base predictor(s)",
        "train-agg": "fine-tune learned aggregators on a frozen base",
        "eval": "streaming evaluation, writes metrics.csv",
        "compare": "train and evaluate every aggregator for each seed",
        "plot": "write SVG trajectory plots",
    }
    for name, text in helps.items():
        sp = sub.add_parser(name, help=text)
        _common(sp, suppress=True)
        if name == "plot":
            sp.add_argument("--count", type=int, default=4, help="number of episodes to plot")
            sp.add_argument("--aggregator", default=None, help="ensembled method to draw")
    return p


def effective_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("seed must be non-negative")
        cfg = replace(cfg, seeds=[args.seed])
        if args.command == "gen-data":
            cfg = replace(cfg, data=replace(cfg.data, data_seed=args.seed))
    if args.out is not None:
        cfg = replace(cfg, out=args.out)
    if args.threads is not None:
        cfg = replace(cfg, threads=args.threads)
    cfg.validate()
    return cfg


def run(args) -> int:
    cfg = effective_config(args)
    out = cfg.out
    ex.write_effective_config(cfg, out)
    if args.command == "gen-data":
        for path in ex.gen_data(cfg, out):
            print(path)
    elif args.command == "train-base":
        for seed in cfg.seeds:
            for path in ex.train_base_step(cfg, seed, out):
                print(path)
    elif args.command == "train-agg":
        for seed in cfg.seeds:
            for path in ex.train_agg_step(cfg, seed, out).values():
                print(path)
    elif args.command == "eval":
        for seed in cfg.seeds:
            result = ex.eval_step(cfg, seed, out)
            for rep in result.reports.values():
                print(f"seed {seed} {rep.aggregator}: minADE {rep.minADE:.3f} minFDE {rep.minFDE:.3f} "
                      f"MR {rep.miss_rate:.4f} n={rep.samples}")
    elif args.command == "compare":
        ex.compare(cfg, out)
        print(f"{out}/compare.csv")
    elif args.command == "plot":
        for seed in cfg.seeds:
            for path in ex.plot_step(cfg, seed, out, args.count, args.aggregator):
                print(path)
    return 0


def main(argv=None) -> int:
    level = os.environ.get("STREAMCAST_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ScheduleError, ScenarioError, CheckpointError, TrainingError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
