"""Command-line entry point.

Usage::

    wavesfm pretrain|finetune|evaluate|simulate --config cfg.yaml \
        [--seed N] [--out DIR] [--runs N] [--dump-preds]

Exit codes: 0 success, 2 invalid configuration, 3 numeric divergence (the
last good checkpoint is kept).  The WAVESFM_THREADS environment variable
caps worker parallelism for gradient-free evaluation fan-out.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys

from .experiment import STAGES, ConfigError, ExperimentConfig, run_experiment
from .optim import DivergenceError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wavesfm",
        description="Masked-autoencoder pretraining and task fine-tuning "
                    "for wireless grid data.")
    sub = parser.add_subparsers(dest="stage", required=True)
    for stage in STAGES:
        p = sub.add_parser(stage, help=f"run the {stage} stage")
        p.add_argument("--config", required=True, help="YAML experiment config")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--out", default=None, help="override the output directory")
        p.add_argument("--runs", type=int, default=None,
                       help="override the number of seeds to average over")
        p.add_argument("--dump-preds", action="store_true",
                       help="persist raw prediction tensors next to the report")
    return parser


def load_cli_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_file(args.config)
    if cfg.stage != args.stage:
        raise ConfigError(
            f"config stage '{cfg.stage}' does not match subcommand '{args.stage}'")
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out_dir"] = args.out
    if args.runs is not None:
        overrides["runs"] = args.runs
    if args.dump_preds:
        overrides["dump_preds"] = True
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_cli_config(args)
        report = run_experiment(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"training diverged: {exc} (last good checkpoint kept)",
              file=sys.stderr)
        return EXIT_DIVERGED
    print(f"{cfg.stage} finished: status={report.status} "
          f"out={cfg.out_dir}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
