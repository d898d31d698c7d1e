"""Batch execution: datasets, subset sampling, run manifests and the resumable run log."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import random
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Iterator, Mapping, Sequence

from . import __version__
from .backend import Backend
from .evaluation import BatchSummary, EvalRecord, Judge, score_episode, summarize, write_reports
from .orchestrator import Episode, EpisodeConfig, PipelineMode, Termination, make_episode_id, run_episode
from .protocol import PromptTemplate, TemplateId
from .retriever import ParseError, Retriever

logger = logging.getLogger(__name__)

LOG_NAME = "episodes.jsonl"
MANIFEST_NAME = "manifest.json"


class DuplicateQid(ValueError):
    def __init__(self, qid: str):
        super().__init__(f"duplicate question id {qid!r}")
        self.qid = qid


class SampleTooLarge(ValueError):
    pass


class ConfigurationError(Exception):
    pass


@dataclass(frozen=True)
class DatasetRecord:
    qid: str
    question: str
    golden_answers: list[str]
    index: int = 0  # position in the source file; feeds the episode id


def load_dataset(path: str | Path) -> list[DatasetRecord]:
    """Read ``{id, question, golden_answers}`` JSON lines, validated, in file order."""
    records: list[DatasetRecord] = []
    seen: set[str] = set()
    with Path(path).open(encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                qid = str(rec["id"])
                question = rec["question"]
                golds = rec["golden_answers"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ParseError(line_no, f"bad dataset record: {exc}") from exc
            if not isinstance(question, str) or not question.strip():
                raise ParseError(line_no, "empty question")
            if isinstance(golds, str):
                golds = [golds]
            if not isinstance(golds, list) or not golds or not all(isinstance(g, str) for g in golds):
                raise ParseError(line_no, "golden_answers must be a non-empty list of strings")
            if qid in seen:
                raise DuplicateQid(qid)
            seen.add(qid)
            records.append(DatasetRecord(qid, question, list(golds), len(records)))
    return records


def sample_subset(records: Sequence[DatasetRecord], n: int, seed: int) -> list[DatasetRecord]:
    """Uniform sample without replacement, original order kept.

    Generator: CPython ``random.Random(seed)`` (MT19937); indices 0..N-1 are
    shuffled with ``Random.shuffle`` and the first ``n`` are taken.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if n > len(records):
        raise SampleTooLarge(f"cannot sample {n} of {len(records)} records")
    idx = list(range(len(records)))
    random.Random(seed).shuffle(idx)
    return [records[i] for i in sorted(idx[:n])]


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    """Everything that determines a run's output. Auth tokens never appear here."""

    dataset_path: str
    dataset_digest: str
    config: EpisodeConfig
    n_sample: int | None = None
    sample_seed: int = 0
    corpus_uri: str | None = None
    corpus_digest: str | None = None
    retriever_url: str | None = None
    reasoner_url: str | None = None
    llm_url: str | None = None
    mock_scenario: str | None = None
    judge_enabled: bool = True
    score_reasoning: bool = False
    skip_judge_on_em: bool = False
    templates_digest: str | None = None
    concurrency: int = 1
    tool_version: str = __version__
    run_id: str = ""
    started_at: str = ""
    finished_at: str = ""

    _IDENTITY = ("dataset_digest", "config", "n_sample", "sample_seed", "corpus_digest", "retriever_url",
                 "mock_scenario", "judge_enabled", "score_reasoning", "skip_judge_on_em", "templates_digest")

    def __post_init__(self):
        if not self.run_id:
            blob = json.dumps([self.identity()], sort_keys=True)
            self.run_id = hashlib.sha256(blob.encode("utf-8")).hexdigest()[:12]

    def identity(self) -> dict[str, Any]:
        d = self.to_dict()
        return {k: d[k] for k in self._IDENTITY}

    def to_dict(self) -> dict[str, Any]:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        d["config"] = self.config.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> RunManifest:
        d = dict(d)
        d["config"] = EpisodeConfig.from_dict(d["config"])
        return cls(**d)


@dataclass
class Services:
    """Backends and retriever for a batch. Factories return a fresh backend per episode."""

    retriever: Retriever
    reasoner_for: Callable[[DatasetRecord, PipelineMode], Backend]
    extractor_for: Callable[[DatasetRecord, PipelineMode], Backend] | None = None
    judge: Judge | None = None
    templates: Mapping[TemplateId, PromptTemplate] | None = None


@dataclass
class BatchResult:
    log_path: Path
    summary: BatchSummary
    episodes_run: int
    backend_failures: int
    report_paths: dict[str, Path] = field(default_factory=dict)

    @property
    def exit_code(self) -> int:
        return 1 if self.backend_failures else 0


def read_run_log(path: str | Path) -> Iterator[dict[str, Any]]:
    p = Path(path)
    if not p.exists():
        return
    with p.open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                yield json.loads(line)


def _recover_log(path: Path) -> set[str]:
    """Drop a torn trailing line left by an interrupted write; return the ids present."""
    if not path.exists():
        return set()
    data = path.read_bytes()
    good_end = 0
    ids = set()
    for line in data.splitlines(keepends=True):
        if not line.endswith(b"\n"):
            break
        try:
            ids.add(json.loads(line)["episode_id"])
        except (json.JSONDecodeError, KeyError):
            break
        good_end += len(line)
    if good_end != len(data):
        logger.warning("truncating %d trailing bytes of %s", len(data) - good_end, path)
        with path.open("r+b") as fh:
            fh.truncate(good_end)
    return ids


def log_line(episode: Episode, record: EvalRecord) -> str:
    return json.dumps(
        {
            "episode_id": episode.episode_id,
            "qid": episode.qid,
            "mode": episode.mode.value,
            "episode": episode.to_dict(),
            "eval": record.to_dict(),
            "timing": episode.timing(),
        },
        ensure_ascii=False,
    )


def _check_manifest(manifest: RunManifest, out: Path) -> None:
    path = out / MANIFEST_NAME
    if path.exists():
        previous = RunManifest.from_dict(json.loads(path.read_text("utf-8")))
        if previous.identity() != manifest.identity():
            diff = sorted(k for k in manifest.identity() if previous.identity()[k] != manifest.identity()[k])
            raise ConfigurationError(f"{out} holds a run with a different manifest (fields: {', '.join(diff)})")
        manifest.started_at = previous.started_at
    if not manifest.started_at:
        manifest.started_at = _now()


def run_batch(
    manifest: RunManifest,
    records: Sequence[DatasetRecord],
    services: Services,
    out_dir: str | Path,
    *,
    limit: int | None = None,
) -> BatchResult:
    """Run every pending episode, append it to the run log, then summarise the whole log.

    Episodes whose id already appears in the log are skipped, so an interrupted
    batch resumes where it stopped. ``limit`` caps how many new episodes this
    call runs. Log lines are written in dataset order by a single writer.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _check_manifest(manifest, out)
    config = manifest.config
    if config.mode.extracts and services.extractor_for is None:
        raise ConfigurationError(f"mode {config.mode.value} needs an extractor backend")
    (out / MANIFEST_NAME).write_text(json.dumps(manifest.to_dict(), indent=2) + "\n", "utf-8")

    log_path = out / LOG_NAME
    done = _recover_log(log_path)
    pending = []
    for rec in records:
        eid = make_episode_id(manifest.dataset_digest, rec.index, config.mode, config.seed)
        if eid not in done:
            pending.append((eid, rec))
    if limit is not None:
        pending = pending[:limit]

    def work(item):
        eid, rec = item
        extractor = services.extractor_for(rec, config.mode) if config.mode.extracts else None
        episode = run_episode(
            rec.question, rec.golden_answers, config,
            reasoner=services.reasoner_for(rec, config.mode),
            retriever=services.retriever,
            extractor=extractor,
            templates=services.templates,
            episode_id=eid,
            qid=rec.qid,
        )
        judge = services.judge if manifest.judge_enabled else None
        record = score_episode(episode, judge, reasoning=manifest.score_reasoning,
                               skip_judge_on_em=manifest.skip_judge_on_em)
        return episode, record

    write_lock = threading.Lock()
    with ThreadPoolExecutor(max_workers=max(1, manifest.concurrency)) as pool, \
            log_path.open("a", encoding="utf-8") as fh:
        for episode, record in pool.map(work, pending):
            with write_lock:
                fh.write(log_line(episode, record) + "\n")
                fh.flush()
                os.fsync(fh.fileno())

    summary, failures = summarize_log(log_path)
    manifest.finished_at = _now()
    (out / MANIFEST_NAME).write_text(json.dumps(manifest.to_dict(), indent=2) + "\n", "utf-8")
    paths = write_reports(summary, out)
    return BatchResult(log_path, summary, len(pending), failures, paths)


def summarize_log(log_path: str | Path) -> tuple[BatchSummary, int]:
    records, failures = [], 0
    for line in read_run_log(log_path):
        records.append(EvalRecord.from_dict(line["eval"]))
        failures += line["episode"]["termination"] == Termination.BACKEND_FAILURE.value
    return summarize(records), failures


def rescore_log(log_path: str | Path, judge: Judge | None, *, reasoning: bool = False,
                skip_judge_on_em: bool = False) -> BatchSummary:
    """Recompute every record's scores from the logged episodes and rewrite the log in place."""
    path = Path(log_path)
    lines = []
    for line in read_run_log(path):
        episode = Episode.from_dict(line["episode"], line.get("timing"))
        record = score_episode(episode, judge, reasoning=reasoning, skip_judge_on_em=skip_judge_on_em)
        line["eval"] = record.to_dict()
        lines.append(json.dumps(line, ensure_ascii=False))
    tmp = path.with_suffix(".jsonl.tmp")
    tmp.write_text("".join(l + "\n" for l in lines), "utf-8")
    tmp.replace(path)
    return summarize_log(path)[0]
