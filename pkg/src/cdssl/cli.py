"""Command-line entry point: ``cdssl <command> --config run.yaml [--seed N] [--out DIR] [--resume]``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys

from .config import ConfigError, ExperimentConfig, load_config
from .metrics import MetricError
from .pipeline import Pipeline, PipelineError, compare_runs, configure_torch

COMMANDS = ("prepare", "pretrain", "finetune", "evaluate", "compare", "saliency", "run")
ENV_OUT = "CDSSL_OUT"
ENV_THREADS = "CDSSL_THREADS"

log = logging.getLogger("cdssl")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment YAML (defaults used when omitted)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help=f"run directory (overrides output_dir and ${ENV_OUT})")
    common.add_argument("--resume", action="store_true", help="skip steps whose stored hash matches")
    common.add_argument("--data-dir", help="shared prepared-data directory (default: <out>/data)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="cdssl", description="Cross-domain self-supervised pretraining pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)
    help_text = {
        "prepare": "synthesize the cohort, standardize images, build splits",
        "pretrain": "run the configured pretraining stages in order",
        "finetune": "fine-tune one regressor per cross-validation fold",
        "evaluate": "predict validation/test sets and write reports",
        "compare": "Steiger Z1 test between two evaluated runs",
        "saliency": "GradCAM overlays for in-study test subjects",
        "run": "all of the above in sequence",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common], help=help_text[name])
        if name == "compare":
            p.add_argument("run_a")
            p.add_argument("run_b")
            p.add_argument("--test-set", default="in_study", help="val, in_study or out_<STUDY>")
    return parser


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    out = args.out or os.environ.get(ENV_OUT)
    if out:
        cfg = dataclasses.replace(cfg, output_dir=out)
    cfg.validate()
    return cfg


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        configure_torch(int(os.environ.get(ENV_THREADS, "1")))
    except ValueError:
        print(f"error: {ENV_THREADS} must be an integer", file=sys.stderr)
        return 2

    if args.command == "compare":
        try:
            res = compare_runs(args.run_a, args.run_b, args.test_set)
        except (PipelineError, MetricError) as exc:
            print(f"error: compare: {exc}", file=sys.stderr)
            return 1
        print(json.dumps(dataclasses.asdict(res), indent=2, sort_keys=True))
        return 0

    try:
        cfg = resolve_config(args)
    except (ConfigError, OSError) as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 2

    pipe = Pipeline(cfg, cfg.output_dir, resume=args.resume, data_dir=args.data_dir)
    steps = {
        "prepare": pipe.prepare,
        "pretrain": pipe.pretrain_stages,
        "finetune": pipe.finetune,
        "evaluate": pipe.evaluate,
        "saliency": pipe.saliency,
        "run": pipe.run,
    }
    try:
        steps[args.command]()
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if args.command in ("evaluate", "run"):
        print((pipe.layout.reports / "summary.txt").read_text(), end="")
    return 0


if __name__ == "__main__":
    sys.exit(main())
