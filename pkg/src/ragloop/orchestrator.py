"""One question's multi-turn reason/search/answer episode under a retrieval post-processing mode."""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

from .backend import Backend, BackendError, DEFAULT_JUDGE_MODEL, GenerationRequest, Usage
from .contextualizer import ENFORCEMENT_POLICIES, WARN, MemoryCache, commit, contextualize
from .dedup import SeenSet, count_skipped, filter_unseen, mark_seen
from .protocol import (
    NO_NEW_DOCUMENTS,
    Answer,
    Malformed,
    PromptTemplate,
    Search,
    TemplateId,
    action_end,
    complete_stopped_output,
    extract_think,
    load_templates,
    parse_next_action,
    render_information_block,
    render_prompt,
    stop_sequences_for,
)
from .retriever import Document, RetrieverError, Retriever, top_k

logger = logging.getLogger(__name__)

FORCED_ANSWER_SUFFIX = (
    "\n\nYou have reached the maximum number of searches. "
    "Based on the information above, provide your final answer now inside <answer> and </answer>.\n\n"
)


class PipelineMode(str, enum.Enum):
    BASELINE = "baseline"
    DEDUP = "dedup"
    CONTEXT = "context"
    HYBRID = "hybrid"

    @property
    def filters(self) -> bool:
        return self in (PipelineMode.DEDUP, PipelineMode.HYBRID)

    @property
    def extracts(self) -> bool:
        return self in (PipelineMode.CONTEXT, PipelineMode.HYBRID)


class Termination(str, enum.Enum):
    ANSWERED = "answered"
    TURN_CAP_REACHED = "turn_cap_reached"
    MALFORMED_OUTPUT = "malformed_output"
    BACKEND_FAILURE = "backend_failure"


class ContextOverflow(Exception):
    pass


@dataclass(frozen=True)
class EpisodeConfig:
    mode: PipelineMode = PipelineMode.BASELINE
    k: int = 3
    pool_size: int = 25
    max_turns: int = 4
    max_new_tokens_per_step: int = 512
    enforcement: str = WARN
    malformed_retries: int = 0
    hybrid_extract_from: str = "filtered"  # or "raw"
    max_transcript_chars: int | None = None
    reasoner_model: str = "search-r1-qwen2.5-7b-base-ppo"
    extractor_model: str = DEFAULT_JUDGE_MODEL
    judge_model: str = DEFAULT_JUDGE_MODEL
    temperature: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "mode", PipelineMode(self.mode))
        if self.k < 1 or self.pool_size < 1 or self.k > self.pool_size:
            raise ValueError(f"need 1 <= k <= pool_size, got k={self.k} pool_size={self.pool_size}")
        if self.max_turns < 1:
            raise ValueError("max_turns must be >= 1")
        if self.max_new_tokens_per_step < 1:
            raise ValueError("max_new_tokens_per_step must be >= 1")
        if self.enforcement not in ENFORCEMENT_POLICIES:
            raise ValueError(f"enforcement must be one of {ENFORCEMENT_POLICIES}")
        if not 0 <= self.malformed_retries <= 2:
            raise ValueError("malformed_retries must be within 0..2")
        if self.hybrid_extract_from not in ("filtered", "raw"):
            raise ValueError("hybrid_extract_from must be 'filtered' or 'raw'")

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["mode"] = self.mode.value
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> EpisodeConfig:
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)


def _doc_ref(doc: Document) -> dict[str, Any]:
    return {"doc_id": doc.doc_id, "title": doc.title, "score": doc.score}


def _action_dict(action) -> dict[str, str]:
    if isinstance(action, Search):
        return {"type": "search", "query": action.query}
    if isinstance(action, Answer):
        return {"type": "answer", "answer": action.answer}
    return {"type": "malformed", "reason": action.reason}


def _action_from_dict(d: Mapping[str, str]):
    if d["type"] == "search":
        return Search(d["query"])
    if d["type"] == "answer":
        return Answer(d["answer"])
    return Malformed(d["reason"])


@dataclass
class Turn:
    index: int
    action: Search | Answer | Malformed
    think: str | None = None
    raw_retrieval: list[Document] = field(default_factory=list)   # top-k of the ranked pool
    candidate_count: int = 0
    shown_documents: list[Document] = field(default_factory=list)
    extractor_input: list[Document] = field(default_factory=list)
    cache_snapshot: str | None = None
    cache_revision: int | None = None
    cache_changed: bool | None = None
    violation: str | None = None
    skipped_duplicates: int = 0
    new_document_count: int = 0
    pool_exhausted: bool = False
    injection: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {
            "index": self.index,
            "action": _action_dict(self.action),
            "think": self.think,
            "raw_retrieval": [_doc_ref(d) for d in self.raw_retrieval],
            "candidate_count": self.candidate_count,
            "shown_documents": [_doc_ref(d) for d in self.shown_documents],
            "extractor_input": [d.doc_id for d in self.extractor_input],
            "cache_snapshot": self.cache_snapshot,
            "cache_revision": self.cache_revision,
            "cache_changed": self.cache_changed,
            "violation": self.violation,
            "skipped_duplicates": self.skipped_duplicates,
            "new_document_count": self.new_document_count,
            "pool_exhausted": self.pool_exhausted,
            "injection": self.injection,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> Turn:
        def docs(items):
            return [Document(i["doc_id"], i["title"], "", i.get("score", 0.0)) for i in items]

        shown = docs(d["shown_documents"])
        by_id = {x.doc_id: x for x in shown + docs(d["raw_retrieval"])}
        return cls(
            index=d["index"],
            action=_action_from_dict(d["action"]),
            think=d["think"],
            raw_retrieval=docs(d["raw_retrieval"]),
            candidate_count=d["candidate_count"],
            shown_documents=shown,
            extractor_input=[by_id.get(i, Document(i, "", "")) for i in d["extractor_input"]],
            cache_snapshot=d["cache_snapshot"],
            cache_revision=d["cache_revision"],
            cache_changed=d["cache_changed"],
            violation=d["violation"],
            skipped_duplicates=d["skipped_duplicates"],
            new_document_count=d["new_document_count"],
            pool_exhausted=d["pool_exhausted"],
            injection=d["injection"],
        )


@dataclass
class Episode:
    episode_id: str
    question: str
    gold_answers: list[str]
    mode: PipelineMode
    qid: str = ""
    turns: list[Turn] = field(default_factory=list)
    final_answer: str | None = None
    termination: Termination | None = None
    error: str | None = None
    notes: list[str] = field(default_factory=list)
    reasoner_usage: Usage = Usage()
    extractor_usage: Usage = Usage()
    transcript: str = ""
    started_at: float = 0.0
    elapsed_s: float = 0.0

    @property
    def retrieval_count(self) -> int:
        return sum(isinstance(t.action, Search) for t in self.turns)

    @property
    def new_document_counts(self) -> list[int]:
        return [t.new_document_count for t in self.turns if isinstance(t.action, Search)]

    def to_dict(self) -> dict[str, Any]:
        return {
            "episode_id": self.episode_id,
            "qid": self.qid,
            "question": self.question,
            "gold_answers": list(self.gold_answers),
            "mode": self.mode.value,
            "termination": self.termination.value if self.termination else None,
            "final_answer": self.final_answer,
            "retrieval_count": self.retrieval_count,
            "error": self.error,
            "notes": list(self.notes),
            "usage": {
                "reasoner": dataclasses.asdict(self.reasoner_usage),
                "extractor": dataclasses.asdict(self.extractor_usage),
            },
            "turns": [t.to_dict() for t in self.turns],
            "transcript": self.transcript,
        }

    def timing(self) -> dict[str, float]:
        return {"started_at": self.started_at, "elapsed_s": self.elapsed_s}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any], timing: Mapping[str, float] | None = None) -> Episode:
        timing = timing or {}
        return cls(
            episode_id=d["episode_id"],
            qid=d["qid"],
            question=d["question"],
            gold_answers=list(d["gold_answers"]),
            mode=PipelineMode(d["mode"]),
            turns=[Turn.from_dict(t) for t in d["turns"]],
            final_answer=d["final_answer"],
            termination=Termination(d["termination"]) if d["termination"] else None,
            error=d["error"],
            notes=list(d["notes"]),
            reasoner_usage=Usage(**d["usage"]["reasoner"]),
            extractor_usage=Usage(**d["usage"]["extractor"]),
            transcript=d["transcript"],
            started_at=timing.get("started_at", 0.0),
            elapsed_s=timing.get("elapsed_s", 0.0),
        )


def make_episode_id(dataset_id: str, question_index: int, mode: PipelineMode | str, seed: int) -> str:
    key = json.dumps([dataset_id, question_index, PipelineMode(mode).value, seed])
    return hashlib.sha256(key.encode("utf-8")).hexdigest()[:16]


def build_injection(mode: PipelineMode, shown_documents: Sequence[Document], cache_snapshot: str | None) -> str:
    """Text spliced into the transcript after a search.

    Filtering modes inject ``<information>`` with the documents; extracting modes
    put the documents in ``<retrieval>`` and the memory cache in ``<information>``.
    """
    mode = PipelineMode(mode)
    if mode.extracts != (cache_snapshot is not None):
        raise ValueError(f"cache snapshot must be given exactly for extracting modes (mode={mode.value})")
    block = render_information_block(shown_documents) if shown_documents else NO_NEW_DOCUMENTS
    if mode.extracts:
        return f"<retrieval> {block} </retrieval>\n<information> {cache_snapshot} </information>"
    return f"<information> {block} </information>"


def classify_new_documents(shown: Sequence[Document], seen_before: SeenSet) -> int:
    return sum(d.doc_id not in seen_before.ids for d in shown)


def run_episode(
    question: str,
    gold_answers: Sequence[str],
    config: EpisodeConfig,
    *,
    reasoner: Backend,
    retriever: Retriever,
    extractor: Backend | None = None,
    templates: Mapping[TemplateId, PromptTemplate] | None = None,
    episode_id: str | None = None,
    qid: str = "",
) -> Episode:
    """Run the reason/search/answer loop until an answer, the turn cap or a failure.

    Backend and retriever failures end the episode with ``BACKEND_FAILURE``;
    they are recorded, not raised.
    """
    templates = templates or load_templates()
    mode = config.mode
    if mode.extracts and extractor is None:
        raise ValueError(f"mode {mode.value} needs an extractor backend")
    episode_id = episode_id or make_episode_id("adhoc", 0, mode, config.seed)
    episode = Episode(episode_id, question, list(gold_answers), mode, qid=qid, started_at=time.time())
    t0 = time.perf_counter()
    try:
        _loop(episode, config, reasoner, retriever, extractor, templates)
    except (BackendError, RetrieverError, ContextOverflow) as exc:
        episode.termination = Termination.BACKEND_FAILURE
        episode.final_answer = None
        episode.error = f"{type(exc).__name__}: {exc}"
        logger.warning("episode %s failed: %s", episode_id, episode.error)
    episode.elapsed_s = time.perf_counter() - t0
    return episode


def _loop(episode: Episode, config: EpisodeConfig, reasoner: Backend, retriever: Retriever,
          extractor: Backend | None, templates: Mapping[TemplateId, PromptTemplate]) -> None:
    mode = config.mode
    seen = SeenSet(episode.episode_id)
    cache = MemoryCache(episode.episode_id)
    episode.transcript = render_prompt(templates[TemplateId.BASE_AGENT], {"question": episode.question})
    stop = tuple(stop_sequences_for("awaiting_action"))
    forced = False
    malformed_left = config.malformed_retries

    while True:
        if not forced and episode.retrieval_count >= config.max_turns:
            forced = True
            episode.transcript += FORCED_ANSWER_SUFFIX
        if config.max_transcript_chars is not None and len(episode.transcript) > config.max_transcript_chars:
            raise ContextOverflow(f"transcript exceeds {config.max_transcript_chars} characters")

        result = reasoner.generate(GenerationRequest(
            config.reasoner_model, episode.transcript, stop,
            config.max_new_tokens_per_step, config.temperature, config.seed,
        ))
        episode.reasoner_usage = episode.reasoner_usage + result.usage
        segment = complete_stopped_output(result.text)
        action = parse_next_action(segment)

        if isinstance(action, Malformed):
            if malformed_left > 0:
                malformed_left -= 1
                episode.notes.append(f"malformed output ({action.reason}), retrying")
                continue
            episode.transcript += segment
            episode.termination = Termination.MALFORMED_OUTPUT
            episode.notes.append(f"malformed output: {action.reason}")
            return

        end = action_end(segment)
        if segment[end:].strip():
            episode.notes.append(f"turn {len(episode.turns) + 1}: text after the first action block ignored")
        kept = segment[:end]
        episode.transcript += kept
        turn = Turn(index=len(episode.turns) + 1, action=action, think=extract_think(kept))

        if isinstance(action, Answer):
            episode.turns.append(turn)
            episode.final_answer = action.answer
            episode.termination = Termination.ANSWERED
            return
        if forced:
            episode.termination = Termination.TURN_CAP_REACHED
            episode.notes.append("search requested after the turn cap; not executed")
            return

        ranked = retriever.retrieve(action.query, config.pool_size)
        turn.raw_retrieval = top_k(ranked, config.k)
        turn.candidate_count = len(ranked.candidates)
        if mode.filters:
            shown = filter_unseen(ranked, seen, config.k)
            turn.skipped_duplicates = count_skipped(ranked, seen, shown, config.k)
            turn.pool_exhausted = len(shown) < config.k
        else:
            shown = list(turn.raw_retrieval)
        turn.shown_documents = shown
        turn.new_document_count = classify_new_documents(shown, seen)
        seen = mark_seen(seen, shown)

        if mode.extracts:
            docs_in = shown if (mode is PipelineMode.CONTEXT or config.hybrid_extract_from == "filtered") \
                else turn.raw_retrieval
            turn.extractor_input = list(docs_in)
            outcome = contextualize(
                episode.question, docs_in, cache, extractor, templates[TemplateId.EXTRACTOR],
                model_id=config.extractor_model, temperature=config.temperature, seed=config.seed,
            )
            episode.extractor_usage = episode.extractor_usage + outcome.usage
            cache = commit(cache, outcome, turn.index, config.enforcement)
            turn.cache_snapshot = cache.content
            turn.cache_revision = cache.revision
            turn.cache_changed = outcome.changed and cache.content == outcome.new_content
            turn.violation = outcome.violation

        turn.injection = build_injection(mode, shown, cache.content if mode.extracts else None)
        episode.transcript += f"\n\n{turn.injection}\n\n"
        episode.turns.append(turn)
