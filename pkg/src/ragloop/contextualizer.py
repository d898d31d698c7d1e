"""LLM extraction of question-relevant facts into a persistent per-episode memory cache."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Sequence

from .backend import Backend, DEFAULT_JUDGE_MODEL, Usage, generate_judged_text
from .protocol import (
    NO_NEW_DOCUMENTS,
    PromptTemplate,
    TagKind,
    TemplateId,
    render_information_block,
    scan_blocks,
)
from .retriever import Document

logger = logging.getLogger(__name__)

NO_HELPFUL_INFORMATION = "No helpful information found"

WARN = "warn"
REJECT = "reject"
ENFORCEMENT_POLICIES = (WARN, REJECT)


class ExtractionParseError(ValueError):
    pass


def is_sentinel(text: str) -> bool:
    return text.strip().lower() == NO_HELPFUL_INFORMATION.lower()


def semantically_empty(text: str) -> bool:
    return not text.strip() or is_sentinel(text)


@dataclass(frozen=True)
class MemoryCache:
    episode_id: str
    content: str = ""
    revision: int = 0
    history: tuple[tuple[int, str], ...] = ()
    violations: tuple[tuple[int, str], ...] = ()


@dataclass(frozen=True)
class ExtractionOutcome:
    new_content: str
    changed: bool
    violation: str | None = None
    usage: Usage = Usage()
    backend_calls: int = 0


def _normalize_ws(text: str) -> str:
    return " ".join(text.split())


def validate_monotonicity(previous: str, new_content: str) -> str | None:
    """Diagnostic if non-trivial ``previous`` content is not kept inside ``new_content``."""
    if semantically_empty(previous):
        return None
    if _normalize_ws(previous) in _normalize_ws(new_content):
        return None
    return f"extractor dropped prior cache content ({len(previous)} chars not preserved)"


def parse_extraction(completion: str) -> str:
    for block in scan_blocks(completion):
        if block.kind is TagKind.INFORMATION:
            return block.content
    raise ExtractionParseError("completion has no complete <information> block")


def contextualize(
    question: str,
    new_documents: Sequence[Document],
    cache: MemoryCache,
    backend: Backend,
    template: PromptTemplate,
    *,
    model_id: str = DEFAULT_JUDGE_MODEL,
    temperature: float = 0.0,
    seed: int | None = 0,
    max_new_tokens: int = 1024,
) -> ExtractionOutcome:
    """Ask the extractor to fold the current turn's documents into the cache.

    Does not touch ``cache``; :func:`commit` applies the outcome.
    """
    if not question.strip():
        raise ValueError("question must be non-empty")
    if template.template_id is not TemplateId.EXTRACTOR:
        raise ValueError("contextualize needs the extractor template")
    if not new_documents and not semantically_empty(cache.content):
        return ExtractionOutcome(cache.content, False)
    information = render_information_block(new_documents) if new_documents else NO_NEW_DOCUMENTS
    bindings = {"question": question, "information": information, "prev_cache": cache.content}
    usage = Usage()
    for attempt in (1, 2):
        result = generate_judged_text(
            backend, template, bindings,
            model_id=model_id, max_new_tokens=max_new_tokens, temperature=temperature, seed=seed,
        )
        usage = usage + result.usage
        try:
            content = parse_extraction(result.text)
        except ExtractionParseError:
            logger.warning("extractor reply without <information> block (attempt %d)", attempt)
            continue
        return ExtractionOutcome(
            content, content != cache.content, validate_monotonicity(cache.content, content), usage, attempt
        )
    return ExtractionOutcome(
        cache.content, False, "extractor reply had no <information> block after retry; kept previous cache",
        usage, 2,
    )


def commit(cache: MemoryCache, outcome: ExtractionOutcome, turn_index: int, policy: str = WARN) -> MemoryCache:
    """Apply an extraction outcome; the only writer of cache content."""
    if policy not in ENFORCEMENT_POLICIES:
        raise ValueError(f"unknown enforcement policy {policy!r}")
    content = outcome.new_content
    violations = cache.violations
    if outcome.violation is not None:
        violations = violations + ((turn_index, outcome.violation),)
        if policy == REJECT:
            content = cache.content
        else:
            logger.warning("turn %d: %s", turn_index, outcome.violation)
    changed = content != cache.content
    return replace(
        cache,
        content=content,
        revision=cache.revision + changed,
        history=cache.history + ((turn_index, content),),
        violations=violations,
    )

