"""Command-line entry point: one subcommand per pipeline stage plus
fixture generation helpers.

Exit codes: 0 on success, 2 on precondition failures (bad config, missing
prerequisites, held locks), 1 on runtime errors.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .errors import CounterflowError, PreconditionError
from .fixtures import write_fixture
from .pipeline import STAGES, load_config, run_stage

log = logging.getLogger("counterflow")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="counterflow",
        description="Counterfactual text pipeline: discover attribute words, "
                    "build a word-pair dictionary with an invertible flow, "
                    "rewrite with error correction, train and evaluate a generator.",
    )
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_stage(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="pipeline config JSON")
        p.add_argument("--artifacts", default="artifacts", help="artifact directory")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--force", action="store_true",
                       help="overwrite artifacts built with a different config")
        p.add_argument("--no-correction", action="store_true",
                       help="ablation: skip error correction in build-parallel")
        p.add_argument("--manual-dict", default=None,
                       help="ablation: use this dictionary TSV instead of the flow-built one")
        return p

    helps = {
        "discover": "train the attribute classifier and discover attribute words",
        "train-flow": "train the invertible disentangling flow",
        "build-dict": "generate counterfactual word pairs and assemble the dictionary",
        "build-parallel": "substitute and error-correct to build parallel text",
        "train-generator": "fine-tune the counterfactual generator",
        "generate": "generate counterfactuals for the evaluation corpus",
        "evaluate": "score fluency, transfer, and optional fairness metrics",
    }
    for stage in STAGES:
        add_stage(stage, helps[stage])
    run_all = add_stage("all", "run every stage in order")

    fixture = sub.add_parser("make-fixture", help="write the bundled synthetic fixture")
    fixture.add_argument("--out", required=True, help="output directory")
    fixture.add_argument("--train-docs", type=int, default=320)
    fixture.add_argument("--eval-docs", type=int, default=96)
    fixture.add_argument("--seed", type=int, default=7)
    return parser


def _resolved_config(args) -> dict:
    config = load_config(args.config)
    if args.seed is not None:
        config["seed"] = args.seed
    if args.no_correction:
        config["rewrite"]["correction"] = False
    if args.manual_dict:
        config["dictionary"]["manual_path"] = args.manual_dict
    return config


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        if args.command == "make-fixture":
            write_fixture(args.out, args.train_docs, args.eval_docs, args.seed)
            print(f"fixture written to {args.out}")
            return 0
        config = _resolved_config(args)
        stages = STAGES if args.command == "all" else (args.command,)
        for stage in stages:
            status = run_stage(stage, config, args.artifacts, force=args.force)
            print(f"{stage}: {status}")
        return 0
    except PreconditionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except CounterflowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
