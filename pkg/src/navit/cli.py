"""Command-line entry point: ``navit {pack-stats,train,eval}``."""

from __future__ import annotations

import argparse
import logging
import sys
import time

from .config import RunConfig, load_config
from .errors import ConfigError, NavitError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

log = logging.getLogger("navit")


def _u64(text):
    value = int(text, 0)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError(f"seed {text} is not an unsigned 64-bit integer")
    return value


def build_parser():
    parser = argparse.ArgumentParser(prog="navit", description="Variable-resolution patch packing toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (("pack-stats", "packing and padding statistics of the training split"),
                            ("train", "train the toy encoder"),
                            ("eval", "run the selected inference analyses on a checkpoint")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="YAML run configuration (defaults apply when omitted)")
        p.add_argument("--seed", type=_u64, help="override the configured seed")
        p.add_argument("--out", help="override the output directory")
        p.add_argument("--precision", choices=("single", "double"), help="override the arithmetic precision")
        if name == "train":
            p.add_argument("--checkpoint", help="resume from this checkpoint")
        if name == "eval":
            p.add_argument("--checkpoint", required=True, help="checkpoint written by train")
    return parser


def resolve_config(args) -> RunConfig:
    config = load_config(args.config) if args.config else RunConfig().validate()
    return config.with_overrides(seed=args.seed, precision=args.precision, out_dir=args.out)


def main(argv=None):
    from . import pipeline

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        config = resolve_config(args)
        start = time.perf_counter()
        if args.command == "pack-stats":
            result = pipeline.run_pack_stats(config)
        elif args.command == "train":
            result, _ = pipeline.run_train(config, resume=args.checkpoint)
        else:
            result = pipeline.run_eval(config, args.checkpoint)
        log.info("%s done in %.2fs: %s", args.command, time.perf_counter() - start, result)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NavitError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
