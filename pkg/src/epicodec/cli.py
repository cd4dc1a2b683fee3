"""``epicodec <subcommand> --config <path> [--set key=value ...] [--out <dir>]``

Exit codes:
  0  success
  1  a stage failed for another reason (missing inputs, failed sweep, ...)
  2  missing or invalid config (the message names the field path)
  3  corrupt bitstream
  4  checkpoint or bitstream produced under a different configuration

``EPICODEC_THREADS`` caps the worker threads of the numerical libraries.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

from threadpoolctl import threadpool_limits

from . import pipeline
from .bitstream import BitstreamError
from .config import ConfigError, load_config

EXIT_OK, EXIT_FAILED, EXIT_CONFIG, EXIT_BITSTREAM, EXIT_MISMATCH = 0, 1, 2, 3, 4

log = logging.getLogger("epicodec")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="epicodec", description="EPI latent-code side-information codec.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="subcommand")
    for name in pipeline.STAGES:
        p = sub.add_parser(name, help=(pipeline.STAGES[name].__doc__ or "").strip().split("\n")[0])
        p.add_argument("--config", required=True, help="experiment config (JSON)")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config field by dotted path; repeatable")
        p.add_argument("--out", default=None, help="output directory (overrides output_dir)")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "train":
            p.add_argument("--resume", action="store_true", help="continue from the existing checkpoint")
        if name == "bdstats":
            p.add_argument("--anchor", help="anchor RD CSV (same as --set bd.anchor=...)")
            p.add_argument("--test", help="test RD CSV (same as --set bd.test=...)")
    return parser


def _threads() -> int | None:
    raw = os.environ.get("EPICODEC_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError("EPICODEC_THREADS", f"expected a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("EPICODEC_THREADS", f"expected a positive integer, got {raw!r}")
    return n


def run(args: argparse.Namespace) -> object:
    overrides = list(args.overrides)
    if args.command == "bdstats":
        overrides += [("bd.anchor", args.anchor)] if args.anchor else []
        overrides += [("bd.test", args.test)] if args.test else []
    cfg = load_config(args.config, overrides, args.out)
    stage = pipeline.STAGES[args.command]
    if args.command == "train":
        return stage(cfg, resume=args.resume)
    return stage(cfg)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with threadpool_limits(limits=_threads()):
            result = run(args)
    except ConfigError as exc:
        print(f"epicodec: invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except BitstreamError as exc:
        print(f"epicodec: corrupt bitstream: {exc}", file=sys.stderr)
        return EXIT_BITSTREAM
    except pipeline.HashMismatchError as exc:
        print(f"epicodec: provenance mismatch: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except (pipeline.StageError, ValueError, OSError) as exc:
        print(f"epicodec: {args.command} failed: {exc}", file=sys.stderr)
        return EXIT_FAILED
    if args.command == "bdstats":
        print((result.parent / "bd.txt").read_text(), end="")
    print(result)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
