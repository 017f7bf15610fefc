"""Command-line entry point wiring the pipeline stages and the annotation service.

Every subcommand takes ``--config`` (a pipeline YAML); ``agree`` can instead
score a bare annotations file with ``--annotations``.  Exit codes: 0 on
success, 1 on configuration errors, 2 on failed stages.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .pipeline import ConfigError, StageError, load_config, run_stage

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_STAGE = 2

logger = logging.getLogger(__name__)


def _add_config_argument(parser: argparse.ArgumentParser, required: bool = True) -> None:
    parser.add_argument("--config", required=required, help="pipeline YAML config")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ragkit",
        description=(
            "Retrieval-augmented paraphrase generation and evaluation for "
            "French medical terms."
        ),
    )
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    subparsers = parser.add_subparsers(dest="command", required=True)

    p_ingest = subparsers.add_parser("ingest", help="load and validate the dataset")
    _add_config_argument(p_ingest)
    p_ingest.add_argument("--force", action="store_true", help="re-run a finished stage")

    p_split = subparsers.add_parser("split", help="assign terms to train/validation/test")
    _add_config_argument(p_split)
    p_split.add_argument("--seed", type=int, default=None, help="override the split seed")
    p_split.add_argument("--force", action="store_true", help="re-run a finished stage")

    p_index = subparsers.add_parser(
        "index", help="build the knowledge base and vector indexes"
    )
    _add_config_argument(p_index)
    p_index.add_argument(
        "action",
        nargs="?",
        default="build",
        choices=["build", "query"],
        help="build the index (default) or query a built one",
    )
    p_index.add_argument("--force", action="store_true", help="re-run a finished stage")
    p_index.add_argument("--encoder", help="encoder name, for query")
    p_index.add_argument("--text", help="query text, for query")
    p_index.add_argument("-k", type=int, default=3, help="hits to return, for query")

    p_run = subparsers.add_parser("run", help="generate paraphrases for every configuration")
    _add_config_argument(p_run)
    p_run.add_argument("--force", action="store_true", help="re-run a finished stage")

    p_eval = subparsers.add_parser("eval", help="score runs against the references")
    _add_config_argument(p_eval)
    p_eval.add_argument("--force", action="store_true", help="re-run a finished stage")

    p_report = subparsers.add_parser("report", help="render metric tables")
    _add_config_argument(p_report)
    p_report.add_argument("--force", action="store_true", help="re-run a finished stage")

    p_agree = subparsers.add_parser("agree", help="inter-annotator agreement")
    _add_config_argument(p_agree, required=False)
    p_agree.add_argument(
        "--annotations", help="annotations JSONL (overrides the config's path)"
    )
    p_agree.add_argument(
        "--json", action="store_true", help="print agreement as JSON to stdout"
    )
    p_agree.add_argument("--force", action="store_true", help="re-run a finished stage")

    p_serve = subparsers.add_parser("serve", help="serve the annotation campaign")
    _add_config_argument(p_serve)
    p_serve.add_argument("--host", default="127.0.0.1")
    p_serve.add_argument("--port", type=int, default=8234)
    p_serve.add_argument(
        "--ui-dir", default=None, help="directory with the built annotation UI"
    )
    return parser


def _agree_json(annotations_path: str) -> int:
    """Score a bare annotations file and print JSON (no config, no manifest)."""
    from .agreement import AgreementError, annotations_from_jsonl, compute_agreement

    try:
        records = annotations_from_jsonl(annotations_path)
        reports = compute_agreement(records)
    except (AgreementError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    print(
        json.dumps(
            {
                "n_records": len(records),
                "agreement": [report.to_dict() for report in reports],
            },
            ensure_ascii=False,
            indent=2,
            sort_keys=True,
        )
    )
    return EXIT_OK


def _index_query(args: argparse.Namespace) -> int:
    from .embed import make_embedder
    from .retriever import load_index, query_index

    config = load_config(args.config)
    if not args.text:
        print("error: index query needs --text", file=sys.stderr)
        return EXIT_CONFIG
    encoder = args.encoder or (config.embedder_order[0] if config.embedder_order else None)
    if not encoder or encoder not in config.embedders:
        print(f"error: unknown encoder {encoder!r}", file=sys.stderr)
        return EXIT_CONFIG
    index_path = config.output_dir / f"index_{encoder}.bin"
    if not index_path.exists():
        print(f"error: index not built: {index_path}", file=sys.stderr)
        return EXIT_STAGE
    index = load_index(index_path)
    embedder = make_embedder(config.embedders[encoder])
    result = query_index(index, args.text, args.k, embedder)
    for hit in result.hits:
        print(f"{hit.score:.6f}\t{hit.chunk_ref}")
    return EXIT_OK


def _serve(args: argparse.Namespace) -> int:
    import uvicorn

    from .annotate import create_app_from_config
    from .pipeline import Manifest

    config = load_config(args.config)
    manifest = Manifest.open(config.output_dir, config.hash)
    app = create_app_from_config(config, manifest, ui_dir=args.ui_dir)
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )

    try:
        if args.command == "agree" and args.annotations and not args.config:
            return _agree_json(args.annotations)

        if args.command == "index" and args.action == "query":
            return _index_query(args)

        if args.command == "serve":
            return _serve(args)

        config = load_config(args.config)
        stage_kwargs: dict = {}
        if args.command == "split" and args.seed is not None:
            stage_kwargs["seed"] = args.seed
        if args.command == "agree" and args.annotations:
            stage_kwargs["annotations"] = args.annotations
        artifacts = run_stage(
            config, args.command, force=getattr(args, "force", False), **stage_kwargs
        )
        for artifact in artifacts:
            print(f"{args.command}: {artifact}")
        if args.command == "agree" and args.json:
            annotations_path = args.annotations or (
                config.annotations_path and str(config.annotations_path)
            )
            if annotations_path:
                return _agree_json(str(annotations_path))
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"stage error: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
