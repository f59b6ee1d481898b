"""Command-line entry point: ``qosnets <stage> --config cfg.yaml [--mode bn] [--out dir]``."""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from . import pipeline
from .am_models import AmConflictError, AmLoadError
from .checkpoint import CheckpointError
from .config import ConfigError, PipelineConfig, load_config
from .data import DatasetError
from .finetune import MODES
from .qnn import UncalibratedError
from .results import ResultsError

STAGES = ("train", "sensitivity", "select", "finetune", "evaluate", "report", "run")
_ERRORS = (AmConflictError, AmLoadError, CheckpointError, ConfigError, DatasetError,
           pipeline.PipelineError, ResultsError, UncalibratedError, OSError)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qosnets", description="Approximate-multiplier operating points "
                                "for quantized networks.")
    p.add_argument("stage", choices=STAGES, help="pipeline stage ('run' executes all of them)")
    p.add_argument("--config", type=Path, help="YAML config file (defaults when omitted)")
    p.add_argument("--mode", default="bn", help="retraining mode: bias, bn or full "
                   "(evaluate also accepts none)")
    p.add_argument("--out", type=Path, help="output directory, overrides output_dir")
    p.add_argument("--seed", type=int, help="set every stage seed")
    p.add_argument("--results", type=Path, nargs="+", help="report: results CSVs to combine")
    p.add_argument("-q", "--quiet", action="store_true")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    allowed = pipeline.EVAL_MODES if args.stage == "evaluate" else MODES
    if args.stage in ("finetune", "evaluate") and args.mode not in allowed:
        parser.error(f"--mode must be one of {', '.join(allowed)} for {args.stage}")
    log = None if args.quiet else print
    try:
        cfg = load_config(args.config) if args.config else PipelineConfig()
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        if args.out is not None:
            cfg = replace(cfg, output_dir=str(args.out.resolve()))
        if args.stage == "train":
            pipeline.cmd_train(cfg, log)
        elif args.stage == "sensitivity":
            pipeline.cmd_sensitivity(cfg, log)
        elif args.stage == "select":
            pipeline.cmd_select(cfg, log)
        elif args.stage == "finetune":
            pipeline.cmd_finetune(cfg, args.mode, log)
        elif args.stage == "evaluate":
            pipeline.cmd_evaluate(cfg, args.mode, log)
        elif args.stage == "report":
            pipeline.cmd_report(cfg, args.results, log)
        else:
            pipeline.run_all(cfg, log=log)
    except _ERRORS as e:
        print(f"qosnets: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
