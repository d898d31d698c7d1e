"""Tagged multi-turn text protocol: prompt templates, tag grammar, block rendering
and parsing of model output into actions.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

NO_NEW_DOCUMENTS = "No new documents found."


class TagKind(str, enum.Enum):
    THINK = "think"
    SEARCH = "search"
    INFORMATION = "information"
    RETRIEVAL = "retrieval"
    ANSWER = "answer"


_TAG_RE = re.compile(r"<(/?)(think|search|information|retrieval|answer)>")


@dataclass(frozen=True)
class TagBlock:
    kind: TagKind
    content: str
    span: tuple[int, int]  # character offsets of the whole block, delimiters included


@dataclass(frozen=True)
class Search:
    query: str


@dataclass(frozen=True)
class Answer:
    answer: str


@dataclass(frozen=True)
class Malformed:
    reason: str  # missing-tag | unclosed-tag | empty-content | nested-tag | hallucinated-information


AgentAction = Search | Answer | Malformed


def scan_blocks(text: str) -> list[TagBlock]:
    """Return complete, non-nested tag blocks in source order.

    An opening tag is paired with the next closing tag of the same kind; a block
    whose content contains any other protocol tag is skipped.
    """
    blocks = []
    pos = 0
    while True:
        m = _TAG_RE.search(text, pos)
        if m is None:
            return blocks
        if m.group(1):
            pos = m.end()
            continue
        kind = m.group(2)
        close = text.find(f"</{kind}>", m.end())
        if close < 0:
            pos = m.end()
            continue
        inner = text[m.end():close]
        if _TAG_RE.search(inner):
            pos = m.end()
            continue
        end = close + len(kind) + 3
        blocks.append(TagBlock(TagKind(kind), inner.strip(), (m.start(), end)))
        pos = end


def parse_next_action(model_output: str) -> AgentAction:
    """Map one generation segment to exactly one action.

    The first opened ``<search>`` or ``<answer>`` tag decides; anything after its
    closing tag is ignored. Never raises.
    """
    for m in _TAG_RE.finditer(model_output):
        closing, kind = m.group(1), m.group(2)
        if kind in ("information", "retrieval") and not closing:
            return Malformed("hallucinated-information")
        if closing or kind not in ("search", "answer"):
            continue
        close = model_output.find(f"</{kind}>", m.end())
        if close < 0:
            return Malformed("unclosed-tag")
        inner = model_output[m.end():close]
        if _TAG_RE.search(inner):
            return Malformed("nested-tag")
        content = inner.strip()
        if not content:
            return Malformed("empty-content")
        return Search(content) if kind == "search" else Answer(content)
    return Malformed("missing-tag")


def action_end(model_output: str) -> int:
    """Offset just past the block that decided the action, or len(text) if none."""
    m = re.search(r"<(search|answer)>", model_output)
    if m is None:
        return len(model_output)
    close = model_output.find(f"</{m.group(1)}>", m.end())
    if close < 0:
        return len(model_output)
    return close + len(m.group(1)) + 3


def extract_think(model_output: str) -> str | None:
    """Content of the first complete ``<think>`` block preceding the action, if any."""
    limit = action_end(model_output)
    for block in scan_blocks(model_output[:limit]):
        if block.kind is TagKind.THINK:
            return block.content
    return None


def complete_stopped_output(text: str) -> str:
    """Re-attach the closing tag a stop sequence removed.

    Generation halts on ``</search>``/``</answer>`` and backends strip the match, so
    the last opened action tag is left dangling.
    """
    last = None
    for m in re.finditer(r"<(/?)(search|answer)>", text):
        last = m
    if last is not None and not last.group(1):
        return text + f"</{last.group(2)}>"
    return text


def stop_sequences_for(state: str = "awaiting_action") -> list[str]:
    if state != "awaiting_action":
        raise ValueError(f"unknown generation state {state!r}")
    return ["</search>", "</answer>"]


class EmptyDocumentSet(ValueError):
    pass


def render_information_block(documents: Sequence) -> str:
    """Number documents from 1 as ``Doc n(Title: "...") text`` lines."""
    if not documents:
        raise EmptyDocumentSet("cannot render an empty document list")
    return "\n".join(
        f'Doc {n}(Title: "{doc.title}") {doc.body}' for n, doc in enumerate(documents, 1)
    )


_DOC_HEAD = re.compile(r'Doc (\d+)\(Title: "([^"\n]*)"\) ?')


def parse_information_block(block: str) -> list[tuple[str, str]]:
    """Split a rendered document block back into (title, text) pairs.

    A document starts at a line beginning with the next expected ``Doc n(Title:``
    header; other lines continue the previous document's text.
    """
    docs: list[tuple[str, list[str]]] = []
    for line in block.split("\n"):
        m = _DOC_HEAD.match(line)
        if m and int(m.group(1)) == len(docs) + 1:
            docs.append((m.group(2), [line[m.end():]]))
        elif docs:
            docs[-1][1].append(line)
    return [(title, "\n".join(parts)) for title, parts in docs]


# --- prompt templates -------------------------------------------------------

class TemplateId(str, enum.Enum):
    BASE_AGENT = "base_agent"
    EXTRACTOR = "extractor"
    JUDGE_MATCH = "judge_match"
    REASONING_SCORE = "reasoning_score"


REQUIRED_PLACEHOLDERS: dict[TemplateId, frozenset[str]] = {
    TemplateId.BASE_AGENT: frozenset({"question"}),
    TemplateId.EXTRACTOR: frozenset({"question", "information", "prev_cache"}),
    TemplateId.JUDGE_MATCH: frozenset({"predicted", "golds"}),
    TemplateId.REASONING_SCORE: frozenset({"question", "information", "think"}),
}

_PLACEHOLDER = re.compile(r"\{([a-z_]+)\}")


class UnboundPlaceholder(KeyError):
    def __init__(self, name: str):
        super().__init__(name)
        self.name = name


@dataclass(frozen=True)
class PromptTemplate:
    template_id: TemplateId
    text: str

    def placeholders(self) -> set[str]:
        return set(_PLACEHOLDER.findall(self.text))


def render_prompt(template: PromptTemplate, bindings: Mapping[str, str]) -> str:
    """Substitute ``{name}`` placeholders in one pass; bound values are never rescanned."""
    needed = REQUIRED_PLACEHOLDERS[template.template_id] | template.placeholders()
    for name in sorted(needed):
        if name not in bindings:
            raise UnboundPlaceholder(name)
    return _PLACEHOLDER.sub(lambda m: str(bindings[m.group(1)]), template.text)


def load_templates(directory: str | Path | None = None) -> dict[TemplateId, PromptTemplate]:
    """Load the four templates from ``directory`` (default: the shipped copies)."""
    out = {}
    for tid in TemplateId:
        if directory is None:
            text = resources.files("ragloop").joinpath("templates", f"{tid.value}.txt").read_text("utf-8")
        else:
            text = (Path(directory) / f"{tid.value}.txt").read_text("utf-8")
        template = PromptTemplate(tid, text.removesuffix("\n"))
        missing = REQUIRED_PLACEHOLDERS[tid] - template.placeholders()
        if missing:
            raise ValueError(f"template {tid.value} lacks placeholders {sorted(missing)}")
        out[tid] = template
    return out


def unresolved_placeholders(text: str, names: Iterable[str]) -> list[str]:
    return [n for n in names if "{" + n + "}" in text]
