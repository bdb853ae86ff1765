"""Command line driver: ``cdt simulate|train|analyze|report --config <path>``.

Exit codes: 0 ok, 2 bad config, 3 gene leakage, 4 checkpoint/world
mismatch, 5 missing inputs.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from threadpoolctl import threadpool_limits

from . import pipeline
from .artifacts import MissingInputError
from .tensor import ConfigError
from .world import LeakageError

EXIT_OK, EXIT_CONFIG, EXIT_LEAKAGE, EXIT_MISMATCH, EXIT_MISSING = 0, 2, 3, 4, 5

log = logging.getLogger("cdt")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cdt", description="Synthetic CDT-II pipeline")
    sub = p.add_subparsers(dest="command", required=True)
    for name, text in (("simulate", "generate the synthetic world"),
                       ("train", "train the model on a simulated world"),
                       ("analyze", "run attention, enrichment, network and attribution analyses"),
                       ("report", "write the Markdown summary and plot-ready tables")):
        s = sub.add_parser(name, help=text)
        s.add_argument("--config", required=True, help="RunConfig JSON file")
        s.add_argument("--out", help="run directory (overrides the config)")
        s.add_argument("--seed", type=int, help="master seed (overrides the config)")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = pipeline.RunConfig.load(args.config, out=args.out, seed=args.seed)
    except (OSError, ValueError, TypeError, json.JSONDecodeError) as e:
        print(f"cdt: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG

    threads = os.environ.get("CDT_THREADS")
    try:
        limit = int(threads) if threads else None
    except ValueError:
        print(f"cdt: CDT_THREADS must be an integer, got {threads!r}", file=sys.stderr)
        return EXIT_CONFIG

    stage = {"simulate": pipeline.run_simulate, "train": pipeline.run_train,
             "analyze": pipeline.run_analyze, "report": pipeline.run_report}[args.command]
    try:
        with threadpool_limits(limits=limit):
            path = stage(cfg)
    except MissingInputError as e:
        print(f"cdt: {e}", file=sys.stderr)
        return EXIT_MISSING
    except pipeline.MismatchError as e:
        print(f"cdt: mismatch: {e}", file=sys.stderr)
        return EXIT_MISMATCH
    except LeakageError as e:
        print(f"cdt: leakage: {e}", file=sys.stderr)
        return EXIT_LEAKAGE
    except ConfigError as e:
        print(f"cdt: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    print(path)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
