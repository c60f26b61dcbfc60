"""hushspeak CLI - error-minimizing protection for speaker data.

Usage:
    hushspeak synth --out data/                       # toy corpus
    hushspeak train --manifest data/train.csv --out a.hspk
    hushspeak protect --model a.hspk --manifest data/train.csv --out prot/
    hushspeak evaluate --manifest prot/train.csv --trials data/trials.txt
    hushspeak audit --clean data/ --protected prot/ --manifest data/train.csv
    hushspeak experiment --out runs/exp1

Global flags (before the subcommand):
    --seed N       random seed (u64), also accepted after the subcommand
    --threads N    torch threads, 0 = auto
    --config PATH  `key = value` file (or $HUSHSPEAK_CONFIG)
    -v / -vv       info / debug logging on stderr
"""

from __future__ import annotations

import argparse
from typing import Optional, Sequence

from . import __version__
from .commands import add_commands, run_command
from .logs import setup_logging


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hushspeak",
        description="hushspeak: imperceptible error-minimizing noise against speaker-model training",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--seed", type=int, default=None, help="Random seed (u64, default 0)")
    parser.add_argument("--threads", type=int, default=None, help="Torch threads (0 = auto)")
    parser.add_argument("--config", dest="config_file", metavar="PATH", help="Run configuration file")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="More logging (-v info, -vv debug)")

    sub = parser.add_subparsers(dest="subcmd")
    add_commands(parser, sub)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> None:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.verbose)

    result = run_command(args)
    if result == -1:
        parser.print_help()
        raise SystemExit(2)
    raise SystemExit(result)


if __name__ == "__main__":
    main()
