"""Episode scoring: exact match, LLM match, reasoning quality, and batch summaries."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import re
import string
import threading
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .backend import Backend, BackendError, DEFAULT_JUDGE_MODEL, generate_judged_text
from .protocol import PromptTemplate, TemplateId, load_templates

logger = logging.getLogger(__name__)

Z_95 = 1.96
CI_METHOD = "normal-approximation (Wald), z=1.96"

_ARTICLES = re.compile(r"\b(a|an|the)\b")
_PUNCT = str.maketrans("", "", string.punctuation)


def normalize_answer(text: str) -> str:
    """Lowercase, drop punctuation and the articles a/an/the, collapse whitespace."""
    text = text.lower().translate(_PUNCT)
    return " ".join(_ARTICLES.sub(" ", text).split())


def exact_match(predicted: str | None, gold_answers: Sequence[str]) -> int:
    if not gold_answers:
        raise ValueError("gold_answers must be non-empty")
    if predicted is None:
        return 0
    pred = normalize_answer(predicted)
    return int(any(pred == normalize_answer(g) for g in gold_answers))


class JudgeParseError(ValueError):
    pass


_SCORE_LINE = re.compile(r"^[\s*#]*score[\s*]*:[\s*]*(.*?)[\s*.]*$", re.I | re.M)
_JUSTIFICATION_LINE = re.compile(r"^[\s*#]*justification[\s*]*:[\s*]*(.*)$", re.I | re.M)


def parse_judge_reply(text: str, allowed: range) -> tuple[int, str]:
    """Read the first ``Score:`` line as an integer in ``allowed`` plus the justification."""
    m = _SCORE_LINE.search(text)
    if m is None:
        raise JudgeParseError(f"no 'Score:' line in judge reply {text[:80]!r}")
    raw = m.group(1).strip()
    if not re.fullmatch(r"\d+", raw):
        raise JudgeParseError(f"non-numeric score {raw!r}")
    score = int(raw)
    if score not in allowed:
        raise JudgeParseError(f"score {score} outside {allowed.start}..{allowed.stop - 1}")
    j = _JUSTIFICATION_LINE.search(text)
    return score, (j.group(1).strip() if j else "")


class JudgeCache:
    """Judge completions keyed by a digest of (template, bindings, attempt).

    Optionally persisted as JSON lines so re-scoring a run log costs nothing.
    """

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path else None
        self._data: dict[str, str] = {}
        self._lock = threading.Lock()
        if self.path and self.path.exists():
            for line in self.path.read_text("utf-8").splitlines():
                if line.strip():
                    rec = json.loads(line)
                    self._data[rec["key"]] = rec["text"]

    @staticmethod
    def key(template_id: TemplateId, bindings: Mapping[str, str], model_id: str, attempt: int) -> str:
        blob = json.dumps([template_id.value, sorted(bindings.items()), model_id, attempt], ensure_ascii=False)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def get(self, key: str) -> str | None:
        return self._data.get(key)

    def put(self, key: str, text: str) -> None:
        with self._lock:
            self._data[key] = text
            if self.path:
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(json.dumps({"key": key, "text": text}, ensure_ascii=False) + "\n")

    def __len__(self):
        return len(self._data)


@dataclass
class Judge:
    """Judge backend plus templates, model settings and the completion cache."""

    backend: Backend
    templates: Mapping[TemplateId, PromptTemplate] = field(default_factory=load_templates)
    model_id: str = DEFAULT_JUDGE_MODEL
    cache: JudgeCache = field(default_factory=JudgeCache)
    temperature: float = 0.0
    seed: int | None = 0

    def _ask(self, template_id: TemplateId, bindings: Mapping[str, str], allowed: range) -> tuple[int, str]:
        last: JudgeParseError | None = None
        for attempt in (1, 2):
            key = JudgeCache.key(template_id, bindings, self.model_id, attempt)
            text = self.cache.get(key)
            if text is None:
                text = generate_judged_text(
                    self.backend, self.templates[template_id], bindings,
                    model_id=self.model_id, temperature=self.temperature, seed=self.seed,
                ).text
                self.cache.put(key, text)
            try:
                return parse_judge_reply(text, allowed)
            except JudgeParseError as exc:
                last = exc
        assert last is not None
        raise last

    def llm_match(self, predicted: str, gold_answers: Sequence[str]) -> tuple[int, str]:
        golds = json.dumps(list(gold_answers), ensure_ascii=False)
        return self._ask(TemplateId.JUDGE_MATCH, {"predicted": predicted, "golds": golds}, range(0, 2))

    def reasoning_quality(self, question: str, information: str, think: str) -> int:
        bindings = {"question": question, "information": information, "think": think}
        return self._ask(TemplateId.REASONING_SCORE, bindings, range(1, 6))[0]


@dataclass
class EvalRecord:
    episode_id: str
    question: str
    gold_answers: list[str]
    predicted: str | None
    em: int
    retrieval_count: int
    llm_match: int | None = None
    llm_match_justification: str | None = None
    reasoning_scores: list[int] | None = None
    new_document_counts: list[int] = field(default_factory=list)
    termination: str | None = None
    judge_error: str | None = None

    def __post_init__(self):
        if self.predicted is None and self.em:
            raise ValueError("em must be 0 without a prediction")
        if self.llm_match not in (None, 0, 1):
            raise ValueError("llm_match must be 0 or 1")
        if self.reasoning_scores and any(not 1 <= s <= 5 for s in self.reasoning_scores):
            raise ValueError("reasoning scores must lie in 1..5")

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> EvalRecord:
        return cls(**d)


def score_episode(episode, judge: Judge | None = None, *, reasoning: bool = False,
                  skip_judge_on_em: bool = False) -> EvalRecord:
    """Score a finished episode. Judge failures leave ``llm_match`` unset."""
    em = exact_match(episode.final_answer, episode.gold_answers)
    rec = EvalRecord(
        episode_id=episode.episode_id,
        question=episode.question,
        gold_answers=list(episode.gold_answers),
        predicted=episode.final_answer,
        em=em,
        retrieval_count=episode.retrieval_count,
        new_document_counts=episode.new_document_counts,
        termination=episode.termination.value if episode.termination else None,
    )
    if episode.final_answer is None:
        rec.llm_match, rec.llm_match_justification = 0, "no answer produced"
    elif skip_judge_on_em and em:
        rec.llm_match, rec.llm_match_justification = 1, "exact match; judge skipped"
    elif judge is not None:
        try:
            rec.llm_match, rec.llm_match_justification = judge.llm_match(episode.final_answer, episode.gold_answers)
        except (JudgeParseError, BackendError) as exc:
            rec.judge_error = f"{type(exc).__name__}: {exc}"
    if reasoning and judge is not None:
        try:
            rec.reasoning_scores = [
                judge.reasoning_quality(episode.question, info, think)
                for info, think in post_retrieval_thinks(episode)
            ]
        except (JudgeParseError, BackendError) as exc:
            rec.judge_error = f"{type(exc).__name__}: {exc}"
    return rec


def post_retrieval_thinks(episode) -> list[tuple[str, str]]:
    """(injected information, following think) pairs, one per think written after a retrieval."""
    pairs = []
    for prev, turn in zip(episode.turns, episode.turns[1:]):
        if prev.injection and turn.think:
            pairs.append((prev.injection, turn.think))
    return pairs


# --- batch summary -------------------------------------------------------------

class EmptyBatch(ValueError):
    pass


def ci_half_width(p: float, n: int) -> float:
    return Z_95 * math.sqrt(p * (1 - p) / n)


@dataclass
class SearchCountGroup:
    retrieval_count: int
    n: int
    em_mean: float
    ci_half_width: float


@dataclass
class BatchSummary:
    n: int
    em_mean: float
    llm_match_mean: float | None
    llm_match_n: int
    avg_retrievals: float
    per_search_count: list[SearchCountGroup]
    heatmap: dict[int, dict[int, int]]  # turn index -> new-document count -> frequency
    reasoning_mean: float | None = None
    ci_method: str = CI_METHOD

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["heatmap"] = {str(t): {str(c): f for c, f in row.items()} for t, row in self.heatmap.items()}
        return d


def summarize(records: Iterable[EvalRecord]) -> BatchSummary:
    """Aggregate metrics. Sums are taken over integers, so the result does not depend on record order."""
    records = list(records)
    if not records:
        raise EmptyBatch("cannot summarize an empty batch")
    n = len(records)
    judged = [r.llm_match for r in records if r.llm_match is not None]
    groups: dict[int, list[int]] = {}
    heat: dict[int, Counter] = {}
    reasoning: list[int] = []
    for r in records:
        groups.setdefault(r.retrieval_count, []).append(r.em)
        for turn, count in enumerate(r.new_document_counts, 1):
            heat.setdefault(turn, Counter())[count] += 1
        reasoning.extend(r.reasoning_scores or ())
    per_count = []
    for count in sorted(groups):
        ems = groups[count]
        p = sum(ems) / len(ems)
        per_count.append(SearchCountGroup(count, len(ems), p, ci_half_width(p, len(ems))))
    return BatchSummary(
        n=n,
        em_mean=sum(r.em for r in records) / n,
        llm_match_mean=sum(judged) / len(judged) if judged else None,
        llm_match_n=len(judged),
        avg_retrievals=sum(r.retrieval_count for r in records) / n,
        per_search_count=per_count,
        heatmap={t: dict(sorted(heat[t].items())) for t in sorted(heat)},
        reasoning_mean=sum(reasoning) / len(reasoning) if reasoning else None,
    )


def write_reports(summary: BatchSummary, out_dir: str | Path) -> dict[str, Path]:
    """Write ``summary.json`` plus tab-separated tables for plotting."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"summary": out / "summary.json", "em_by_searches": out / "em_by_searches.tsv",
             "heatmap": out / "heatmap.tsv"}
    paths["summary"].write_text(json.dumps(summary.to_dict(), indent=2) + "\n", "utf-8")
    with paths["em_by_searches"].open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["searches", "n", "em_mean", "ci95_low", "ci95_high", "ci95_half_width"])
        for g in summary.per_search_count:
            w.writerow([g.retrieval_count, g.n, f"{g.em_mean:.6f}", f"{g.em_mean - g.ci_half_width:.6f}",
                        f"{g.em_mean + g.ci_half_width:.6f}", f"{g.ci_half_width:.6f}"])
    max_new = max((c for row in summary.heatmap.values() for c in row), default=0)
    with paths["heatmap"].open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["search_iteration"] + [f"new_{c}" for c in range(max_new + 1)])
        for turn, row in summary.heatmap.items():
            w.writerow([turn] + [row.get(c, 0) for c in range(max_new + 1)])
    return paths
