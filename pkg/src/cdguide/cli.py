"""Command line: ``cdguide <subcommand> [--config f] [--set k=v ...] [--seed n] [--out dir]``.

Exit codes: 0 success, 2 config error, 3 missing prior stage, 4 numerical failure.
"""

import argparse
import json
import logging
import sys
from importlib import resources

from . import config as C
from . import pipeline
from .approximator import NumericalError

EXIT_OK, EXIT_CONFIG, EXIT_DEPENDENCY, EXIT_NUMERICAL = 0, 2, 3, 4


def shipped_config(name):
    """Path of a config shipped with the package (``synthetic_1d`` etc.)."""
    ref = resources.files("cdguide") / "configs" / f"{name}.json"
    if not ref.is_file():
        raise C.ConfigError(f"no shipped config {name!r}")
    return str(ref)


def _config_path(arg):
    if arg is None or arg.endswith(".json"):
        return arg
    return shipped_config(arg)


def build_parser():
    p = argparse.ArgumentParser(prog="cdguide", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in pipeline.STAGES:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON config file, or the name of a shipped config")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="dotted-path override")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", default="runs/default", help="output directory")
        sp.add_argument("-v", "--verbose", action="store_true")
        if name == "sample":
            sp.add_argument("--mode", choices=["ML", "MCL", "oracle"])
            sp.add_argument("--integrator", choices=["sde", "ode"])
            sp.add_argument("--eta", type=float)
    return p


def run(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    overrides = list(args.set)
    for key in ("mode", "integrator", "eta"):
        val = getattr(args, key, None)
        if val is not None:
            overrides.append(f"sample.{key}={json.dumps(val)}")
    try:
        cfg = C.load(_config_path(args.config), overrides, args.seed)
        r = pipeline.Run(cfg, args.out)
        result = pipeline.STAGES[args.command](r)
    except C.ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except pipeline.DependencyError as e:
        print(f"dependency error: {e}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (KeyError, TypeError, ValueError) as e:
        # malformed values surface while building objects from the config
        print(f"config error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_CONFIG
    _summary(args.command, result)
    return EXIT_OK


def _summary(command, result):
    docs = result.values() if command == "all-synthetic" else [result]
    for doc in docs:
        keep = {k: v for k, v in doc.items() if k not in ("versions", "preprocessing", "config_hash")}
        print(json.dumps(keep, sort_keys=True, default=str))


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
