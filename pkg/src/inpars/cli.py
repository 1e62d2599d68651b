"""Command-line entry point.

    inpars <stage> --config config.toml [--force] [--stage-output DIR] [--seed N]
    inpars export --corpus corpus.tsv --corpus-format tsv --output corpus.jsonl

Stages: index, generate, curate, retrieve, rerank, evaluate, all. Errors
exit nonzero and print one machine-readable JSON object on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .corpus import CORPUS_FORMATS, export_jsonl, ingest
from .errors import InparsError
from .pipeline import STAGES, load_config, run_stage


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="inpars",
        description="Synthetic query generation and retrieval evaluation pipeline",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    for stage in (*STAGES, "all"):
        stage_parser = sub.add_parser(stage, help=f"run the {stage} stage")
        stage_parser.add_argument("--config", required=True, help="pipeline config (TOML)")
        stage_parser.add_argument("--force", action="store_true",
                                  help="re-run even if artifacts are fresh")
        stage_parser.add_argument("--stage-output", metavar="DIR",
                                  help="override the configured output directory")
        stage_parser.add_argument("--seed", type=int,
                                  help="override generation and curation seeds")

    export = sub.add_parser("export", help="re-emit a corpus in canonical JSONL")
    export.add_argument("--corpus", required=True, help="corpus file to read")
    export.add_argument("--corpus-format", choices=CORPUS_FORMATS, default="jsonl")
    export.add_argument("--format", choices=["jsonl"], default="jsonl",
                        help="output format (only jsonl)")
    export.add_argument("--output", required=True, help="output path")
    return parser


def _run_pipeline_command(args) -> int:
    config = load_config(args.config)
    if args.stage_output:
        config = config.with_output_dir(args.stage_output)
    if args.seed is not None:
        config = config.with_seed(args.seed)
    summaries = run_stage(config, args.command, force=args.force)
    json.dump({"ok": True, "stages": summaries}, sys.stdout, sort_keys=True)
    sys.stdout.write("\n")
    return 0


def _run_export(args) -> int:
    corpus = ingest(args.corpus, args.corpus_format)
    export_jsonl(corpus, args.output)
    json.dump({"ok": True, "doc_count": corpus.doc_count, "output": args.output},
              sys.stdout, sort_keys=True)
    sys.stdout.write("\n")
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        if args.command == "export":
            return _run_export(args)
        return _run_pipeline_command(args)
    except InparsError as exc:
        json.dump(exc.payload(), sys.stderr, sort_keys=True)
        sys.stderr.write("\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
