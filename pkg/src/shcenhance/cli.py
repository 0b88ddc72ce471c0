"""Command line entry point: ``shcenhance {synth,train,enhance,eval,analyze}``."""
from __future__ import annotations

import argparse
import logging
import sys

from . import __version__
from .config import dump_config, load_config
from .errors import ConfigError, DomainError, ShapeError
from .runs import NumericalCheckError, cmd_analyze, cmd_enhance, cmd_eval, cmd_synth, cmd_train

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
ESTIMATORS = ("oracle-sub", "oracle-mag", "wiener", "linear")

log = logging.getLogger("shcenhance")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="shcenhance", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name, helptext in [("synth", "synthesize the (RT60 x SNR) scene grid"),
                           ("train", "fit linear per-order stages on synthesized scenes"),
                           ("enhance", "enhance scenes in the spherical harmonic domain"),
                           ("eval", "score enhanced scenes (STOI, SI-SDR, per-order SHC MSE)"),
                           ("analyze", "transform diagnostics for the configured array"),
                           ("config", "print the resolved configuration with all defaults")]:
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("--config", help="YAML config file (all keys optional; see `shcenhance config`)")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out-dir", default="runs", help="shared output directory (default: runs)")
        sp.add_argument("--jobs", type=int, default=1, help="worker processes for scene-level work")
        sp.add_argument("--estimator", choices=ESTIMATORS, help="per-order estimator")
        sp.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg["seed"] = args.seed
        if args.estimator:
            cfg["enhance"]["estimator"] = args.estimator
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        if args.command == "config":
            sys.stdout.write(dump_config(cfg))
            return EXIT_OK
        fn = {"synth": cmd_synth, "train": cmd_train, "enhance": cmd_enhance,
              "eval": cmd_eval, "analyze": cmd_analyze}[args.command]
        manifest = fn(cfg, args.out_dir, args.jobs)
        print(manifest)
        return EXIT_OK
    except NumericalCheckError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, DomainError, ShapeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
