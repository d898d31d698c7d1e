"""Command line entry point: ``ragloop run|score|report|ingest``."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

from .backend import ChatCompletionsBackend, DEFAULT_JUDGE_MODEL, RequestLimiter
from .evaluation import Judge, JudgeCache, write_reports
from .orchestrator import EpisodeConfig, PipelineMode
from .protocol import load_templates
from .retriever import BM25Retriever, DuplicateId, ParseError, RemoteRetriever, ingest_corpus
from .runner import (
    LOG_NAME,
    ConfigurationError,
    DuplicateQid,
    RunManifest,
    SampleTooLarge,
    Services,
    file_digest,
    load_dataset,
    rescore_log,
    run_batch,
    sample_subset,
    summarize_log,
)

logger = logging.getLogger("ragloop")

EXIT_OK, EXIT_EPISODE_FAILURES, EXIT_CONFIG = 0, 1, 2

REASONER_KEY_ENV = "RAGLOOP_REASONER_API_KEY"
LLM_KEY_ENV = "OPENAI_API_KEY"


def _templates_digest(directory: str | None) -> str:
    h = hashlib.sha256()
    for tid, t in sorted(load_templates(directory).items(), key=lambda kv: kv[0].value):
        h.update(tid.value.encode() + b"\0" + t.text.encode("utf-8") + b"\0")
    return h.hexdigest()[:16]


def _add_judge_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--llm-url", default="https://api.openai.com/v1",
                   help=f"chat-completions base URL for extractor and judge (key from ${LLM_KEY_ENV})")
    p.add_argument("--judge-model", default=DEFAULT_JUDGE_MODEL)
    p.add_argument("--no-judge", action="store_true", help="skip LLM match scoring")
    p.add_argument("--score-reasoning", action="store_true", help="also run the 1-5 reasoning-quality judge")
    p.add_argument("--judge-skip-on-em", action="store_true", help="count exact matches as LLM matches without a call")
    p.add_argument("--mock", metavar="SCENARIO", help="use the named fixture scenario's mock backends")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ragloop", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a batch of episodes and score them")
    run.add_argument("--mode", choices=[m.value for m in PipelineMode], default="baseline")
    run.add_argument("--dataset", help="JSON lines {id, question, golden_answers}")
    src = run.add_mutually_exclusive_group()
    src.add_argument("--corpus", help="JSON lines {id, title, text} for the in-process BM25 retriever")
    src.add_argument("--retriever-url", help="remote retrieval service, e.g. http://host:8000/retrieve")
    run.add_argument("--k", type=int, default=3)
    run.add_argument("--pool-size", type=int, default=25)
    run.add_argument("--max-turns", type=int, default=None)
    run.add_argument("--max-new-tokens", type=int, default=512)
    run.add_argument("--malformed-retries", type=int, default=0)
    run.add_argument("--enforcement", choices=["warn", "reject"], default="warn")
    run.add_argument("--hybrid-extract-from", choices=["filtered", "raw"], default="filtered")
    run.add_argument("--n-sample", type=int, default=None)
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--out", required=True)
    run.add_argument("--concurrency", type=int, default=1)
    run.add_argument("--max-episodes", type=int, default=None, help="stop after this many new episodes")
    run.add_argument("--reasoner-url", help=f"chat-completions base URL of the reasoner (key from ${REASONER_KEY_ENV})")
    run.add_argument("--reasoner-model", default=EpisodeConfig.reasoner_model)
    run.add_argument("--extractor-model", default=DEFAULT_JUDGE_MODEL)
    run.add_argument("--templates", help="directory with replacement prompt templates")
    _add_judge_args(run)

    score = sub.add_parser("score", help="re-score an existing run log")
    score.add_argument("log", help="run directory or episodes.jsonl")
    _add_judge_args(score)

    report = sub.add_parser("report", help="write summary.json and plot tables from a run log")
    report.add_argument("log", help="run directory or episodes.jsonl")
    report.add_argument("--out", help="output directory (default: next to the log)")

    ingest = sub.add_parser("ingest", help="validate a corpus file and report its size and digest")
    ingest.add_argument("corpus")
    ingest.add_argument("--out", help="write the normalized corpus here")
    return parser


def _log_path(arg: str) -> Path:
    p = Path(arg)
    return p / LOG_NAME if p.is_dir() else p


def _make_judge(args, cache_path: Path | None, scenario=None, limiter=None) -> Judge | None:
    if args.no_judge:
        return None
    backend = scenario.judge_backend() if scenario else ChatCompletionsBackend(
        args.llm_url, api_key_env=LLM_KEY_ENV, limiter=limiter)
    return Judge(backend, load_templates(getattr(args, "templates", None)), args.judge_model, JudgeCache(cache_path))


def cmd_run(args) -> int:
    from .mocks import load_scenario

    scenario = load_scenario(args.mock) if args.mock else None
    overrides = dict(scenario.config) if scenario else {}
    if args.max_turns is not None:
        overrides["max_turns"] = args.max_turns
    config = EpisodeConfig.from_dict({
        "k": args.k, "pool_size": args.pool_size, "max_new_tokens_per_step": args.max_new_tokens,
        "malformed_retries": args.malformed_retries, "enforcement": args.enforcement,
        "hybrid_extract_from": args.hybrid_extract_from, "reasoner_model": args.reasoner_model,
        "extractor_model": args.extractor_model, "judge_model": args.judge_model, "seed": args.seed,
        **overrides, "mode": args.mode,
    })

    if args.dataset:
        records = load_dataset(args.dataset)
        dataset_path, dataset_digest = str(args.dataset), file_digest(args.dataset)
    elif scenario:
        records = scenario.dataset
        dataset_path, dataset_digest = f"fixture:{scenario.name}", scenario.dataset_digest()
    else:
        raise ConfigurationError("--dataset is required unless --mock is given")
    if args.n_sample is not None:
        records = sample_subset(records, args.n_sample, args.seed)

    limiter = RequestLimiter(max(4, args.concurrency))
    corpus_uri = corpus_digest = None
    if args.retriever_url:
        retriever = RemoteRetriever(args.retriever_url, limiter=limiter)
    elif args.corpus:
        corpus = ingest_corpus(args.corpus)
        retriever = BM25Retriever(corpus)
        corpus_uri, corpus_digest = corpus.source_uri, corpus.digest()
    elif scenario:
        retriever = scenario.retriever()
        corpus_uri, corpus_digest = scenario.corpus.source_uri, scenario.corpus.digest()
    else:
        raise ConfigurationError("one of --corpus or --retriever-url is required")

    out = Path(args.out)
    templates = load_templates(args.templates)
    if scenario:
        reasoner_for, extractor_for = scenario.reasoner_for, scenario.extractor_for
    else:
        if not args.reasoner_url:
            raise ConfigurationError("--reasoner-url is required outside --mock mode")
        reasoner = ChatCompletionsBackend(args.reasoner_url, api_key_env=REASONER_KEY_ENV, limiter=limiter)
        llm = ChatCompletionsBackend(args.llm_url, api_key_env=LLM_KEY_ENV, limiter=limiter)
        reasoner_for = lambda rec, mode: reasoner  # noqa: E731
        extractor_for = lambda rec, mode: llm  # noqa: E731
    out.mkdir(parents=True, exist_ok=True)
    judge = _make_judge(args, out / "judge_cache.jsonl", scenario, limiter)

    manifest = RunManifest(
        dataset_path=dataset_path,
        dataset_digest=dataset_digest,
        config=config,
        n_sample=args.n_sample,
        sample_seed=args.seed,
        corpus_uri=corpus_uri,
        corpus_digest=corpus_digest,
        retriever_url=args.retriever_url,
        reasoner_url=None if scenario else args.reasoner_url,
        llm_url=None if scenario else args.llm_url,
        mock_scenario=scenario.name if scenario else None,
        judge_enabled=not args.no_judge,
        score_reasoning=args.score_reasoning,
        skip_judge_on_em=args.judge_skip_on_em,
        templates_digest=_templates_digest(args.templates),
        concurrency=args.concurrency,
    )
    result = run_batch(manifest, records, Services(retriever, reasoner_for, extractor_for, judge, templates),
                       out, limit=args.max_episodes)
    _print_summary(result.summary.to_dict())
    print(f"ran {result.episodes_run} new episodes; log: {result.log_path}")
    if result.backend_failures:
        print(f"{result.backend_failures} episodes ended in backend failure", file=sys.stderr)
    return result.exit_code


def cmd_score(args) -> int:
    from .mocks import load_scenario

    log = _log_path(args.log)
    scenario = load_scenario(args.mock) if args.mock else None
    judge = _make_judge(args, log.parent / "judge_cache.jsonl", scenario)
    summary = rescore_log(log, judge, reasoning=args.score_reasoning, skip_judge_on_em=args.judge_skip_on_em)
    write_reports(summary, log.parent)
    _print_summary(summary.to_dict())
    return EXIT_OK


def cmd_report(args) -> int:
    log = _log_path(args.log)
    summary, failures = summarize_log(log)
    paths = write_reports(summary, args.out or log.parent)
    _print_summary(summary.to_dict())
    for name, p in paths.items():
        print(f"{name}: {p}")
    return EXIT_EPISODE_FAILURES if failures else EXIT_OK


def cmd_ingest(args) -> int:
    corpus = ingest_corpus(args.corpus)
    print(json.dumps({"documents": len(corpus), "digest": corpus.digest(), "source": corpus.source_uri}))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            for d in corpus.documents:
                fh.write(json.dumps({"id": d.doc_id, "title": d.title, "text": d.body}, ensure_ascii=False) + "\n")
    return EXIT_OK


def _print_summary(d: dict) -> None:
    keys = ("n", "em_mean", "llm_match_mean", "avg_retrievals", "reasoning_mean")
    print(json.dumps({k: d[k] for k in keys}))


COMMANDS = {"run": cmd_run, "score": cmd_score, "report": cmd_report, "ingest": cmd_ingest}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigurationError, ParseError, DuplicateQid, DuplicateId, SampleTooLarge, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
