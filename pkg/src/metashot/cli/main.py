"""``metashot <subcommand> --config <path> [--seed N] [--threads N] [--override key=value ...]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from metashot.cli.config import parse_config
from metashot.cli.runner import SUBCOMMANDS, execute
from metashot.errors import MetashotError

EXIT_ERROR = 2


def build_parser():
    p = argparse.ArgumentParser(prog="metashot", description="Few-shot meta-learning experiments.")
    sub = p.add_subparsers(dest="subcommand", required=True, metavar="subcommand")
    for name in SUBCOMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="flat key = value config file")
        s.add_argument("--seed", type=int, help="overrides the config seed")
        s.add_argument("--threads", type=int, help="worker threads (1 = reproducibility reference)")
        s.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
        s.add_argument("--output", help="run directory (overrides the config and the env default)")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(message)s",
        stream=sys.stderr,
    )
    overrides = list(args.override)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.threads is not None:
        overrides.append(f"threads={args.threads}")
    if args.output is not None:
        overrides.append(f"output={args.output}")
    try:
        cfg = parse_config(args.config, overrides)
        report = execute(args.subcommand, cfg)
    except MetashotError as exc:
        print(f"metashot: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    print(json.dumps({"subcommand": args.subcommand, "output": str(cfg.output_dir()), "report": _brief(report)}))
    return 0


def _brief(report):
    out = dict(report)
    out.pop("accuracies", None)
    return out


if __name__ == "__main__":
    sys.exit(main())
