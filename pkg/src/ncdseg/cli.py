"""Command-line entry points: synth, run, eval, report.

Exit codes: 0 success, 1 usage/config error, 2 runtime failure.
NCDSEG_LOG sets the logging level (default WARNING).
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

from . import config as cfgmod
from . import pipeline
from .dataio import DataFormatError

log = logging.getLogger("ncdseg")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems instead of exiting with code 2."""

    def error(self, message):
        raise UsageError(message)


def _load_config(args) -> cfgmod.RunConfig:
    cfg = cfgmod.load_config(args.config) if args.config else cfgmod.default_config()
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        cfg = cfgmod.parse_config(cfg.dump() + f"\n{key} = {raw}\n")
    return cfg


def build_parser() -> _Parser:
    parser = _Parser(prog="ncdseg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="config file (flat key = value lines)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config key (repeatable)")

    p = sub.add_parser("synth", parents=[common], help="generate a benchmark directory")
    p.add_argument("--out", required=True, help="benchmark output directory")

    p = sub.add_parser("run", parents=[common], help="run stages 1-3 and evaluate")
    p.add_argument("--benchmark", required=True, help="directory from 'synth'")
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--no-cache", action="store_true", help="disable stage caching")

    p = sub.add_parser("eval", help="evaluate a saved checkpoint on the val split")
    p.add_argument("--model", required=True, help="checkpoint path (.ncdm)")
    p.add_argument("--benchmark", required=True, help="directory from 'synth'")
    p.add_argument("--matching", choices=["auto", "exact", "over"], default="auto",
                   help="novel-channel matching mode (default: infer from head size)")

    p = sub.add_parser("report", help="tabulate completed runs")
    p.add_argument("runs", nargs="+", help="run directories from 'run'")
    p.add_argument("--sweep-out", help="directory for sweep CSVs")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("NCDSEG_LOG", "WARNING").upper())
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "synth":
            out = pipeline.cmd_synth(_load_config(args), args.out)
            print(f"benchmark written to {out}")
        elif args.command == "run":
            agg = pipeline.cmd_run(_load_config(args), args.benchmark, args.out,
                                   use_cache=not args.no_cache)
            for seed, miou in zip(agg["seeds"], agg["novel_miou"]):
                print(f"seed {seed}: novel mIoU {miou:.4f}")
            print(f"mean novel mIoU {agg['mean_novel_miou']:.4f}")
        elif args.command == "eval":
            over = None if args.matching == "auto" else (args.matching == "over")
            report = pipeline.cmd_eval(args.model, args.benchmark, over_clustering=over)
            for key in ("base_miou", "novel_miou", "all_miou", "mapping_mode"):
                print(f"{key} = {report[key]}")
        elif args.command == "report":
            print(pipeline.cmd_report(args.runs, sweep_out=args.sweep_out), end="")
        return 0
    except (UsageError, cfgmod.ConfigError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (pipeline.PipelineError, DataFormatError, OSError, ValueError) as exc:
        log.debug("runtime failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
