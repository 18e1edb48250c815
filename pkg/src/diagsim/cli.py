"""Command-line entry point: run batches, build indexes, re-evaluate, report.

Exit codes: 0 on success, 1 on fatal setup problems, 2 when a batch
completed but some sessions failed.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .batch import (
    BatchError,
    FatalSetup,
    NoSuccessfulSessions,
    aggregate,
    build_providers,
    load_config,
    load_records,
    render_report,
    run_batch,
    write_summary,
)
from .evaluation import evaluate_session
from .retrieval import EmbeddingIndex, build_index, chunk_corpus

log = logging.getLogger("diagsim")

EXIT_OK = 0
EXIT_FATAL = 1
EXIT_WITH_FAILURES = 2


def _add_provider_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config file; flags override its values")
    parser.add_argument("--model", help="chat model identifier")
    parser.add_argument("--provider-url", dest="provider_url", help="provider base URL")
    parser.add_argument("--embed-model", dest="embed_model", help="embedding model identifier")
    parser.add_argument("--mock-script", dest="mock_script", help="JSON mock script for offline runs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diagsim", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", help="run a simulation batch end to end")
    _add_provider_flags(run)
    run.add_argument("--judge-model", dest="judge_model", help="rubric judge model")
    run.add_argument("--judge-url", dest="judge_url", help="judge base URL (defaults to provider URL)")
    run.add_argument("--questionnaire", help="instrument file (.txt/.md)")
    run.add_argument("--profiles", help="directory of client profile .txt files")
    run.add_argument("--corpus", help="reference corpus text file")
    run.add_argument("--out", help="output directory")
    run.add_argument("--workers", type=int)
    run.add_argument("--count", type=int, help="sessions per profile")
    run.add_argument("--chunk-size", dest="chunk_size", type=int)
    run.add_argument("--top-k", dest="top_k", type=int)
    run.add_argument("--mode", choices=["turn_by_turn", "one_shot"])
    run.add_argument("--seed", type=int)

    index = commands.add_parser("index", help="build or inspect a retrieval index")
    _add_provider_flags(index)
    index.add_argument("--corpus", help="reference corpus text file")
    index.add_argument("--out", help="index path prefix (writes .json/.f32)")
    index.add_argument("--chunk-size", dest="chunk_size", type=int)
    index.add_argument("--inspect", help="print manifest info for an existing index prefix")

    evaluate = commands.add_parser("eval", help="re-evaluate existing session records")
    _add_provider_flags(evaluate)
    evaluate.add_argument("--records", required=True, help="directory of session JSON files")
    evaluate.add_argument("--judge-model", dest="judge_model")
    evaluate.add_argument("--judge-url", dest="judge_url")

    report = commands.add_parser("report", help="render a markdown report from session records")
    report.add_argument("--records", required=True, help="directory of session JSON files")
    report.add_argument("--out", help="output directory for summary artifacts")

    return parser


def _overrides(args: argparse.Namespace) -> dict:
    keys = (
        "model", "provider_url", "embed_model", "mock_script", "judge_model", "judge_url",
        "questionnaire", "profiles", "corpus", "out", "workers", "count",
        "chunk_size", "top_k", "mode", "seed",
    )
    return {k: getattr(args, k) for k in keys if getattr(args, k, None) is not None}


def _cmd_run(args: argparse.Namespace) -> int:
    config = load_config(args.config, _overrides(args))
    summary = run_batch(config)
    print(render_report(summary))
    print(f"wrote {summary.n_sessions} session records to {config.output_dir / 'sessions'}")
    failed = summary.status_counts.get("failed", 0) + summary.status_counts.get("partial", 0)
    return EXIT_WITH_FAILURES if failed else EXIT_OK


def _cmd_index(args: argparse.Namespace) -> int:
    if args.inspect:
        index = EmbeddingIndex.load(args.inspect)
        print(json.dumps({
            "rows": len(index),
            "dim": index.dim,
            "embed_model": index.embed_model,
            "first_chunk": index.chunks[0].text[:80] if len(index) else None,
        }, indent=2))
        return EXIT_OK
    if not args.out:
        raise FatalSetup("index build needs --out")
    overrides = _overrides(args)
    overrides.pop("out", None)
    config = load_config(args.config, overrides | {"out": str(Path(args.out).parent / "index_build")})
    if args.corpus:
        config.corpus_path = Path(args.corpus)
    provider, _ = build_providers(config)
    corpus = config.corpus_path.read_text(encoding="utf-8")
    chunks = chunk_corpus(corpus, config.chunk_size)
    index = build_index(chunks, provider.embed,
                        provider.config.embed_model if hasattr(provider, "config") else "mock")
    manifest, matrix = index.save(args.out)
    print(f"indexed {len(index)} chunks (dim {index.dim}) -> {manifest}, {matrix}")
    return EXIT_OK


def _cmd_eval(args: argparse.Namespace) -> int:
    records_dir = Path(args.records)
    overrides = _overrides(args)
    overrides["out"] = str(records_dir.parent / "eval_rerun")
    config = load_config(args.config, overrides)
    provider, judge = build_providers(config)
    count = 0
    for path in sorted(records_dir.glob("*.json")):
        from .batch import SessionRecord

        record = SessionRecord.from_json_dict(json.loads(path.read_text(encoding="utf-8")))
        if record.transcript is None or record.truth is None:
            continue
        record.evaluation = evaluate_session(
            record.transcript, record.diagnosis, record.truth,
            embed_fn=provider.embed, judge=judge,
        )
        path.write_text(json.dumps(record.to_json_dict(), ensure_ascii=False, indent=2) + "\n",
                        encoding="utf-8")
        count += 1
    print(f"re-evaluated {count} records in {records_dir}")
    return EXIT_OK


def _cmd_report(args: argparse.Namespace) -> int:
    records = load_records(args.records)
    summary = aggregate(records)
    out_dir = Path(args.out) if args.out else Path(args.records).parent
    write_summary(summary, out_dir)
    print(render_report(summary))
    print(f"summary artifacts written to {out_dir}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    handlers = {"run": _cmd_run, "index": _cmd_index, "eval": _cmd_eval, "report": _cmd_report}
    try:
        return handlers[args.command](args)
    except (FatalSetup, NoSuccessfulSessions) as exc:
        log.error("%s", exc)
        return EXIT_FATAL
    except BatchError as exc:
        log.error("%s", exc)
        return EXIT_FATAL


if __name__ == "__main__":
    sys.exit(main())
