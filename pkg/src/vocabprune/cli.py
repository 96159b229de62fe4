"""Command-line entry point.

Exit status: 0 success, 1 a stage failed, 2 verification failed, 3 bad config.
The log level comes from ``VOCABPRUNE_LOG`` (default ``INFO``).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

from . import __version__
from .config import ConfigError, check_document, load_config, read_document
from .pipeline import (
    ARTIFACTS,
    STAGES,
    Pipeline,
    StageError,
    emit_report,
    estimate_summary,
    verification_ok,
)
from .vocab import ModelDims

EXIT_OK, EXIT_STAGE, EXIT_VERIFY, EXIT_CONFIG = 0, 1, 2, 3
LOG_ENV = "VOCABPRUNE_LOG"

log = logging.getLogger("vocabprune")


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("-c", "--config", help="TOML or JSON config file")
    p.add_argument("--force", action="store_true", help="rerun even when inputs are unchanged")
    g = p.add_argument_group("config overrides")
    g.add_argument("--tokenizer", help="original SentencePiece model")
    g.add_argument("--checkpoint", help="original safetensors checkpoint")
    g.add_argument("--target-corpus", help="target-language corpus")
    g.add_argument("--secondary-corpus", help="secondary-language corpus")
    g.add_argument("--sample", help="sentences used to check the pruned tokenizer")
    g.add_argument("--output-dir", help="artifact directory")
    g.add_argument("--n-total", type=int)
    g.add_argument("--n-top-original", type=int)
    g.add_argument("--n-secondary", type=int)
    g.add_argument("--specials", nargs="*", metavar="PIECE")
    g.add_argument("--top-original", choices=("lowest_id", "frequency"))
    g.add_argument("--extra-ids", type=int)
    g.add_argument("--vocab-tensor-names", nargs="+", metavar="NAME")
    g.add_argument("--vocab-axis", type=int)
    g.add_argument("--unk-penalty", type=float)
    g.add_argument("--workers", type=int)


_OVERRIDE_DESTS = (
    "tokenizer", "checkpoint", "target_corpus", "secondary_corpus", "sample", "output_dir",
    "n_total", "n_top_original", "n_secondary", "specials", "top_original", "extra_ids",
    "vocab_tensor_names", "vocab_axis", "unk_penalty", "workers",
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vocabprune",
        description="Prune a multilingual T5-style model to the vocabulary one language needs.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "analyze": "count pieces over the corpora and write frequency tables and coverage stats",
        "select": "choose the kept vocabulary and write plan.json",
        "prune-tokenizer": "write the pruned tokenizer model",
        "prune-model": "write the pruned checkpoint",
        "verify": "check the pruned artifacts against their sources",
        "report": "write report.json and print a summary",
        "pipeline": "run every stage in order",
    }
    for name, text in helps.items():
        _add_config_args(sub.add_parser(name, help=text, description=text))

    est = sub.add_parser("estimate", help="print the predicted size reduction for given dims")
    est.add_argument("-c", "--config", help="config whose [model.dims] and n_total are used")
    est.add_argument("--v-old", type=int)
    est.add_argument("--d-model", type=int)
    est.add_argument("--n-vocab-matrices", type=int)
    est.add_argument("--total-params", type=int, dest="total_params_old")
    est.add_argument("--bytes-per-param", type=int)
    est.add_argument("--v-new", type=int, help="kept vocabulary size (default: selection.n_total)")
    return parser


def _overrides(args: argparse.Namespace) -> dict:
    return {k: getattr(args, k) for k in _OVERRIDE_DESTS if getattr(args, k, None) is not None}


def _estimate(args: argparse.Namespace) -> int:
    dims: dict = {}
    v_new = None
    if args.config:
        doc = read_document(Path(args.config))
        check_document(doc)
        dims.update(doc.get("model", {}).get("dims", {}))
        v_new = doc.get("selection", {}).get("n_total")
    for k in ("v_old", "d_model", "n_vocab_matrices", "total_params_old", "bytes_per_param"):
        if getattr(args, k) is not None:
            dims[k] = getattr(args, k)
    if args.v_new is not None:
        v_new = args.v_new
    missing = [k for k in ("v_old", "d_model", "n_vocab_matrices", "total_params_old") if k not in dims]
    if v_new is None:
        missing.append("v_new")
    if missing:
        raise ConfigError(f"estimate needs {', '.join(missing)}")
    try:
        summary = estimate_summary(ModelDims(**dims), v_new)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    sys.stdout.write(summary)
    return EXIT_OK


def _run(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, _overrides(args))
    pipe = Pipeline(cfg, force=args.force)
    stages = STAGES if args.command == "pipeline" else (args.command,)
    try:
        pipe.run(stages)
    except StageError as exc:
        log.error("%s", exc)
        return EXIT_STAGE
    if "report" in stages:
        report = json.loads((cfg.output_dir / ARTIFACTS["report"]).read_text(encoding="utf-8"))
        emit_report(report, None, sys.stdout)
    if {"verify", "report"} & set(stages) and verification_ok(cfg) is False:
        log.error("verification failed; see %s", cfg.output_dir / ARTIFACTS["verify"])
        return EXIT_VERIFY
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    level = os.environ.get(LOG_ENV, "INFO").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    args = build_parser().parse_args(argv)
    try:
        if args.command == "estimate":
            return _estimate(args)
        return _run(args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
