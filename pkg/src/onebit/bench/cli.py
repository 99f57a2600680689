"""Command line entry point.

    onebit train        --config exp.cfg --out runs/train
    onebit ber-sweep    --config exp.cfg --out runs/ber --threads 4
    onebit csi-sweep    --config exp.cfg --out runs/csi
    onebit ablate-stages --config exp.cfg --out runs/ablation
    onebit scatter      --config exp.cfg --out runs/scatter

Exit codes: 0 success, 2 configuration error, 3 runtime failure.
"""

import argparse
import logging
import sys

from onebit.bench import sweeps
from onebit.bench.config import parse_config
from onebit.errors import ConfigError, OneBitError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _train(cfg, args):
    sweeps.train_from_config(cfg, out_dir=args.out, progress_every=500)


def _ber(cfg, args):
    sweeps.run_ber_sweep(cfg, args.out, threads=args.threads)


def _csi(cfg, args):
    sweeps.run_csi_sweep(cfg, args.out, threads=args.threads)


def _ablate(cfg, args):
    sweeps.run_stage_ablation(cfg, args.out, threads=args.threads)


def _scatter(cfg, args):
    sweeps.dump_constellation(cfg, out_dir=args.out, threads=args.threads)


COMMANDS = {
    "train": _train,
    "ber-sweep": _ber,
    "csi-sweep": _csi,
    "ablate-stages": _ablate,
    "scatter": _scatter,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="onebit", description="One-bit massive-MIMO detection experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="experiment config file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--threads", type=int, default=1, help="worker threads for Monte-Carlo trials")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s: %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = parse_config(args.config)
        COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OneBitError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
