"""Deterministic offline test doubles and fixture scenarios.

Everything here is episode-local unless noted; instances hold no state shared
across episodes.
"""

from __future__ import annotations

import hashlib
import json
import random
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Mapping, Sequence

from .backend import (
    GenerationRequest,
    GenerationResult,
    ScriptedBackend,
    ScriptedPolicy,
    apply_mock_limits,
)
from .contextualizer import NO_HELPFUL_INFORMATION, is_sentinel
from .evaluation import normalize_answer
from .orchestrator import FORCED_ANSWER_SUFFIX, Episode, EpisodeConfig, PipelineMode, make_episode_id, run_episode
from .protocol import (
    NO_NEW_DOCUMENTS,
    Answer,
    Search,
    load_templates,
    parse_information_block,
    parse_next_action,
)
from .retriever import BM25Retriever, Corpus, Document, RankedRetrieval, RetrieverUnavailable, tokenize
from .runner import DatasetRecord


class CallCounter:
    """Counts generate calls across wrapped backends (thread-safe enough for int += under the GIL)."""

    def __init__(self):
        self.calls = 0

    def wrap(self, backend):
        return _Counted(backend, self)


@dataclass
class _Counted:
    inner: Any
    counter: CallCounter

    def generate(self, request: GenerationRequest) -> GenerationResult:
        self.counter.calls += 1
        return self.inner.generate(request)


def scripted_reasoner(policy: ScriptedPolicy) -> ScriptedBackend:
    return ScriptedBackend(policy)


# --- reactive reasoners -------------------------------------------------------

@dataclass
class ForgetfulReasoner:
    """Reasoner that only looks at what was injected since its previous step.

    It needs every document title in ``needs`` to be visible at once (as a
    ``Title: "..."`` header or a cache sentence); while one is missing it searches
    the query paired with the first missing title. When told to
    answer without having seen everything it answers ``fallback_answer``.
    """

    needs: Sequence[tuple[str, str]]  # (title, query)
    answer: str
    fallback_answer: str
    _prev_len: int = 0
    _prev_out: str = ""

    def generate(self, request: GenerationRequest) -> GenerationResult:
        prompt = request.prompt
        visible = prompt[self._prev_len + len(self._prev_out):] if self._prev_len else ""
        missing = [(t, q) for t, q in self.needs
                   if f'Title: "{t}"' not in visible and fact_sentence(t) not in visible]
        if not missing:
            out = f"<think> All the needed facts are in front of me. </think>\n<answer> {self.answer} </answer>"
        elif FORCED_ANSWER_SUFFIX.strip() in visible:
            out = f"<think> I have to answer now. </think>\n<answer> {self.fallback_answer} </answer>"
        else:
            marker, query = missing[0]
            out = f"<think> I still need information about {marker}. </think>\n<search> {query} </search>"
        result = apply_mock_limits(out, request)
        self._prev_len = len(prompt)
        self._prev_out = result.text + ("</search>" if "<search>" in result.text else "</answer>")
        return result


@dataclass
class RandomReasoner:
    """Issues a seeded random number of searches over ``vocab`` words, then answers."""

    seed: int
    vocab: Sequence[str]
    max_searches: int = 6

    def __post_init__(self):
        self._rng = random.Random(self.seed)
        self._budget = self._rng.randint(1, self.max_searches)
        self._issued = 0

    def generate(self, request: GenerationRequest) -> GenerationResult:
        if self._issued >= self._budget or FORCED_ANSWER_SUFFIX.strip() in request.prompt[-400:]:
            out = f"<think> done </think>\n<answer> {self._rng.choice(self.vocab)} </answer>"
        else:
            words = self._rng.sample(list(self.vocab), self._rng.randint(1, 3))
            out = f"<think> step {self._issued + 1} </think>\n<search> {' '.join(words)} </search>"
            self._issued += 1
        return apply_mock_limits(out, request)


# --- extractors ---------------------------------------------------------------

_EXTRACTOR_FIELDS = re.compile(
    r"- Question: (?P<question>.*?)\n- Retrieved Information: (?P<information>.*?)\n"
    r"- Previous Information: (?P<prev>.*?)\n\nNow you should analyze",
    re.S,
)


def parse_extractor_prompt(prompt: str) -> tuple[str, str, str]:
    m = _EXTRACTOR_FIELDS.search(prompt)
    if m is None:
        raise AssertionError("prompt is not a rendered extractor prompt")
    return m.group("question"), m.group("information"), m.group("prev")


def _titles(information: str) -> list[str]:
    if information.strip() == NO_NEW_DOCUMENTS:
        return []
    out = []
    for title, _ in parse_information_block(information):
        if title not in out:
            out.append(title)
    return out


def fact_sentence(title: str) -> str:
    return f"Fact from {title}."


@dataclass
class FaithfulExtractor:
    """Keeps the previous cache verbatim and appends one sentence per novel title."""

    def generate(self, request: GenerationRequest) -> GenerationResult:
        _, information, prev = parse_extractor_prompt(request.prompt)
        prev = "" if is_sentinel(prev) else prev.strip()
        parts = [prev] if prev else []
        for title in _titles(information):
            s = fact_sentence(title)
            if s not in prev and s not in parts:
                parts.append(s)
        content = " ".join(parts) or NO_HELPFUL_INFORMATION
        return apply_mock_limits(f"<information> {content} </information>", request)


@dataclass
class DroppingExtractor:
    """Adversarial extractor that reports only the current documents, dropping the cache."""

    def generate(self, request: GenerationRequest) -> GenerationResult:
        _, information, _ = parse_extractor_prompt(request.prompt)
        content = " ".join(fact_sentence(t) for t in _titles(information)) or NO_HELPFUL_INFORMATION
        return apply_mock_limits(f"<information> {content} </information>", request)


# --- judge --------------------------------------------------------------------

_MATCH_FIELDS = re.compile(r"\nPredicted Answer: (?P<pred>.*)\nGround Truth Answers: (?P<golds>.*)\Z", re.S)
_REASONING_FIELDS = re.compile(r"\nQuestion: (?P<q>.*)\nInformation: (?P<info>.*)\nReasoning: (?P<think>.*)\Z", re.S)


@dataclass
class RuleJudge:
    """Scores 1 iff exact match holds or the (predicted, gold) pair is a listed synonym.

    Reasoning prompts get 1 + 4 * (share of the information's content words reused
    in the reasoning, capped at 8 words), rounded.
    """

    synonyms: Sequence[tuple[str, str]] = ()

    def __post_init__(self):
        self._pairs = {(normalize_answer(a), normalize_answer(b)) for a, b in self.synonyms}

    def verdict(self, predicted: str, golds: Sequence[str]) -> tuple[int, str]:
        p = normalize_answer(predicted)
        for g in golds:
            ng = normalize_answer(g)
            if p == ng:
                return 1, f"'{predicted}' matches '{g}' exactly."
            if (p, ng) in self._pairs or (ng, p) in self._pairs:
                return 1, f"'{predicted}' and '{g}' refer to the same thing."
        return 0, f"'{predicted}' does not match any ground truth answer."

    def generate(self, request: GenerationRequest) -> GenerationResult:
        prompt = request.prompt
        m = _MATCH_FIELDS.search(prompt)
        if m is not None and "Score 0 or 1" in prompt:
            score, why = self.verdict(m.group("pred"), json.loads(m.group("golds")))
            return apply_mock_limits(f"Score: {score}\nJustification: {why}", request)
        m = _REASONING_FIELDS.search(prompt)
        if m is None:
            raise AssertionError("RuleJudge received an unknown prompt")
        info = {w for w in tokenize(m.group("info")) if len(w) > 3}
        think = set(tokenize(m.group("think")))
        share = len(info & think) / max(1, min(len(info), 8))
        score = 1 + round(4 * min(1.0, share))
        return apply_mock_limits(f"Score: {score}\nJustification: reuses {len(info & think)} key terms.", request)


# --- retriever ------------------------------------------------------------------

@dataclass
class StaticRetriever:
    """Fixed query -> ranked doc id table; unknown queries fall back to BM25 over the corpus."""

    corpus: Corpus
    rankings: Mapping[str, Sequence[str]] = field(default_factory=dict)
    fallback: bool = True

    def __post_init__(self):
        self._by_id = {d.doc_id: d for d in self.corpus.documents}
        self._table = {q.strip(): list(ids) for q, ids in self.rankings.items()}
        for ids in self._table.values():
            unknown = [i for i in ids if i not in self._by_id]
            if unknown:
                raise ValueError(f"rankings reference unknown ids {unknown}")
        self._bm25 = BM25Retriever(self.corpus) if self.fallback and len(self.corpus) else None

    def retrieve(self, query: str, pool_size: int) -> RankedRetrieval:
        ids = self._table.get(query.strip())
        if ids is None:
            if self._bm25 is None:
                raise RetrieverUnavailable(f"no ranking scripted for {query!r}")
            return self._bm25.retrieve(query, pool_size)
        n = len(ids)
        docs = tuple(
            Document(i, self._by_id[i].title, self._by_id[i].body, float(n - r)) for r, i in enumerate(ids)
        )
        return RankedRetrieval(query, docs[:pool_size], pool_size)


# --- fixture scenarios ------------------------------------------------------------

class FixtureError(ValueError):
    pass


def _scripted_outcome(policy: ScriptedPolicy) -> tuple[int, str | None]:
    searches, answer = 0, None
    for step in policy.steps:
        action = parse_next_action(step.response)
        if isinstance(action, Search):
            searches += 1
        elif isinstance(action, Answer):
            answer = action.answer
    return searches, answer


@dataclass
class FixtureScenario:
    name: str
    description: str
    corpus: Corpus
    dataset: list[DatasetRecord]
    rankings: dict[str, list[str]]
    reasoners: dict[str, Any]
    extractors: dict[str, Any]
    judge: dict[str, Any]
    config: dict[str, Any]
    expected: dict[str, dict[str, dict[str, Any]]]
    modes: list[PipelineMode]

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> FixtureScenario:
        dataset = [
            DatasetRecord(str(r["id"]), r["question"], list(r["golden_answers"]), i)
            for i, r in enumerate(d["dataset"])
        ]
        scenario = cls(
            name=d["name"],
            description=d.get("description", ""),
            corpus=Corpus.from_records(d["corpus"], f"fixture:{d['name']}"),
            dataset=dataset,
            rankings={q: list(ids) for q, ids in d.get("rankings", {}).items()},
            reasoners=dict(d["reasoners"]),
            extractors=dict(d.get("extractors", {})),
            judge=dict(d.get("judge", {"type": "rule", "synonyms": []})),
            config=dict(d.get("config", {})),
            expected={m: dict(v) for m, v in d.get("expected", {}).items()},
            modes=[PipelineMode(m) for m in d.get("modes", [m.value for m in PipelineMode])],
        )
        scenario.validate()
        return scenario

    def _spec(self, table: Mapping[str, Any], qid: str, mode: PipelineMode, default=None):
        spec = table.get(qid, table.get("*", default))
        if spec is not None and "by_mode" in spec:
            spec = spec["by_mode"].get(mode.value, spec["by_mode"].get("*"))
        return spec

    def validate(self) -> None:
        qids = {r.qid for r in self.dataset}
        for mode_name, per_q in self.expected.items():
            mode = PipelineMode(mode_name)
            for qid, exp in per_q.items():
                if qid not in qids:
                    raise FixtureError(f"expected values for unknown question {qid}")
                spec = self._spec(self.reasoners, qid, mode)
                if spec is None:
                    raise FixtureError(f"no reasoner for {qid} in {mode_name}")
                if spec["type"] != "scripted":
                    continue
                searches, answer = _scripted_outcome(ScriptedPolicy.from_json(spec["steps"]))
                if "retrieval_count" in exp and exp["retrieval_count"] != searches:
                    raise FixtureError(f"{self.name}/{mode_name}/{qid}: policy issues {searches} searches, "
                                       f"expected {exp['retrieval_count']}")
                if exp.get("final_answer") is not None and exp["final_answer"] != answer:
                    raise FixtureError(f"{self.name}/{mode_name}/{qid}: policy answers {answer!r}")

    def retriever(self) -> StaticRetriever:
        return StaticRetriever(self.corpus, self.rankings)

    def reasoner_for(self, record: DatasetRecord, mode: PipelineMode):
        spec = self._spec(self.reasoners, record.qid, PipelineMode(mode))
        if spec is None:
            raise FixtureError(f"no reasoner for {record.qid}")
        return _build_backend(spec)

    def extractor_for(self, record: DatasetRecord, mode: PipelineMode):
        spec = self._spec(self.extractors, record.qid, PipelineMode(mode), {"type": "faithful"})
        return _build_backend(spec)

    def judge_backend(self):
        return _build_backend(self.judge)

    def dataset_digest(self) -> str:
        blob = json.dumps([[r.qid, r.question, r.golden_answers] for r in self.dataset], ensure_ascii=False)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _build_backend(spec: Mapping[str, Any]):
    kind = spec["type"]
    if kind == "scripted":
        return scripted_reasoner(ScriptedPolicy.from_json(spec["steps"]))
    if kind == "forgetful":
        return ForgetfulReasoner([tuple(n) for n in spec["needs"]], spec["answer"], spec["fallback_answer"])
    if kind == "random":
        return RandomReasoner(spec["seed"], spec["vocab"], spec.get("max_searches", 6))
    if kind == "faithful":
        return FaithfulExtractor()
    if kind == "dropping":
        return DroppingExtractor()
    if kind == "rule":
        return RuleJudge([tuple(p) for p in spec.get("synonyms", [])])
    raise FixtureError(f"unknown backend type {kind!r}")


def scenario_config(scenario: FixtureScenario, mode: PipelineMode | str, **overrides) -> EpisodeConfig:
    return EpisodeConfig.from_dict({**scenario.config, **overrides, "mode": PipelineMode(mode)})


def run_scenario(scenario: FixtureScenario, mode: PipelineMode | str, **overrides) -> list[Episode]:
    """Run every question of a scenario under one mode with fresh mock backends."""
    config = scenario_config(scenario, mode, **overrides)
    retriever = scenario.retriever()
    templates = load_templates()
    episodes = []
    for rec in scenario.dataset:
        episodes.append(run_episode(
            rec.question, rec.golden_answers, config,
            reasoner=scenario.reasoner_for(rec, config.mode),
            retriever=retriever,
            extractor=scenario.extractor_for(rec, config.mode) if config.mode.extracts else None,
            templates=templates,
            episode_id=make_episode_id(scenario.dataset_digest(), rec.index, config.mode, config.seed),
            qid=rec.qid,
        ))
    return episodes


def available_scenarios() -> list[str]:
    root = resources.files("ragloop").joinpath("fixtures")
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def load_scenario(name_or_path: str | Path) -> FixtureScenario:
    """Load a fixture by shipped name (e.g. ``trace_baseline``) or by file path."""
    path = Path(name_or_path)
    if path.suffix == ".json" and path.exists():
        text = path.read_text("utf-8")
    else:
        res = resources.files("ragloop").joinpath("fixtures", f"{name_or_path}.json")
        if not res.is_file():
            raise FixtureError(f"unknown scenario {name_or_path!r}; known: {available_scenarios()}")
        text = res.read_text("utf-8")
    return FixtureScenario.from_dict(json.loads(text))
