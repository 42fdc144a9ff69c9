"""Command-line entry point: ``ptkbcir --config CONFIG <command> [options]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ExperimentConfig
from .errors import PtkbCirError
from .pipeline import Experiment
from .reformulation import RetrieverKind, Strategy

logger = logging.getLogger("ptkbcir")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ptkbcir", description="Personalized conversational retrieval experiments.")
    parser.add_argument("--config", required=True, help="experiment config file (YAML or JSON)")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("index", help="build the BM25 index")
    p.add_argument("--force", action="store_true")
    p = sub.add_parser("embed", help="embed the collection for dense retrieval")
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("annotate", help="produce a PTKB annotation set")
    p.add_argument("--source", required=True, choices=["human", "automatic", "llm"])
    p.add_argument("--split", default="test", choices=["test", "train"])
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("reformulate", help="reformulate every turn under one strategy")
    p.add_argument("--strategy", required=True, choices=[s.value for s in Strategy])
    p.add_argument("--shots", type=int, default=0)
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("retrieve", help="turn a reformulation file into a run")
    p.add_argument("--strategy", required=True, choices=[s.value for s in Strategy])
    p.add_argument("--shots", type=int, default=0)
    p.add_argument("--retriever", required=True, choices=[k.value for k in RetrieverKind])
    p.add_argument("--input", type=Path, help="reformulation file (default: the one the pipeline wrote)")
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("evaluate", help="score runs and build comparison tables")
    p.add_argument("runs", nargs="*", type=Path, help="run files (default: every run of the grid)")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--subset", dest="subset", action="store_true", default=None)
    group.add_argument("--no-subset", dest="subset", action="store_false")

    sub.add_parser("pipeline", help="run every step for the configured grid")
    sub.add_parser("stats", help="print dataset statistics")
    return parser


def run(args: argparse.Namespace, **transports) -> int:
    config = ExperimentConfig.load(args.config)
    if args.seed is not None:
        config.seed = args.seed
    exp = Experiment(config, **transports)
    cmd = args.command
    if cmd == "index":
        print(exp.cmd_index(force=args.force))
    elif cmd == "embed":
        print(exp.cmd_embed(force=args.force))
    elif cmd == "annotate":
        print(exp.cmd_annotate(args.source, args.split, force=args.force))
    elif cmd == "reformulate":
        print(exp.cmd_reformulate(args.strategy, args.shots, force=args.force))
    elif cmd == "retrieve":
        print(exp.cmd_retrieve(args.strategy, args.shots, args.retriever, args.input, force=args.force))
    elif cmd == "evaluate":
        outputs = exp.cmd_evaluate(args.runs or None, args.subset)
        print(outputs["summary"].read_text(), end="")
    elif cmd == "pipeline":
        outputs = exp.cmd_pipeline()
        print(outputs["summary"].read_text(), end="")
    elif cmd == "stats":
        for split, stats in exp.cmd_stats().items():
            print(f"[{split}]")
            for label, value in stats.as_rows():
                print(f"{label}\t{value}")
    return 0


def main(argv: list[str] | None = None, **transports) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return run(args, **transports)
    except (PtkbCirError, OSError) as e:
        print(f"ptkbcir: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
