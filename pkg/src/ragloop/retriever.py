"""Ranked candidate retrieval: an in-process BM25 index and a remote-service client."""

from __future__ import annotations

import hashlib
import json
import math
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Protocol, Sequence

import httpx

from .backend import DEFAULT_LIMITER, RequestLimiter


class RetrieverError(Exception):
    pass


class RetrieverUnavailable(RetrieverError):
    pass


class EmptyCorpus(RetrieverError):
    pass


class ParseError(ValueError):
    def __init__(self, line_no: int, message: str = ""):
        super().__init__(f"line {line_no}: {message}" if message else f"line {line_no}")
        self.line_no = line_no


class DuplicateId(ValueError):
    def __init__(self, doc_id: str):
        super().__init__(f"duplicate id {doc_id!r}")
        self.doc_id = doc_id


def content_digest(title: str, body: str) -> str:
    h = hashlib.sha256(json.dumps([title, body], ensure_ascii=False).encode("utf-8"))
    return h.hexdigest()[:16]


@dataclass(frozen=True)
class Document:
    doc_id: str
    title: str
    body: str
    score: float = 0.0

    def __post_init__(self):
        if not self.doc_id:
            raise ValueError("doc_id must be non-empty")


def _rank_key(doc: Document):
    return (-doc.score, doc.doc_id)


@dataclass(frozen=True)
class RankedRetrieval:
    query: str
    candidates: tuple[Document, ...]
    pool_size: int

    def __post_init__(self):
        if self.pool_size < 1:
            raise ValueError("pool_size must be >= 1")
        cands = tuple(self.candidates)
        object.__setattr__(self, "candidates", cands)
        if len(cands) > self.pool_size:
            raise ValueError("more candidates than pool_size")
        if len({d.doc_id for d in cands}) != len(cands):
            raise ValueError("duplicate doc_id in ranked list")
        if any(_rank_key(a) > _rank_key(b) for a, b in zip(cands, cands[1:])):
            raise ValueError("candidates not sorted by (score desc, doc_id asc)")


@dataclass(frozen=True)
class Corpus:
    documents: tuple[Document, ...]
    source_uri: str = ""

    def __post_init__(self):
        docs = tuple(self.documents)
        object.__setattr__(self, "documents", docs)
        seen = set()
        for d in docs:
            if d.doc_id in seen:
                raise DuplicateId(d.doc_id)
            seen.add(d.doc_id)

    def __len__(self):
        return len(self.documents)

    def digest(self) -> str:
        h = hashlib.sha256()
        for d in self.documents:
            h.update(json.dumps([d.doc_id, d.title, d.body], ensure_ascii=False).encode("utf-8"))
            h.update(b"\n")
        return h.hexdigest()

    @classmethod
    def from_records(cls, records: Iterable[Mapping], source_uri: str = "") -> Corpus:
        return cls(tuple(_record_to_document(r) for r in records), source_uri)


def _record_to_document(rec: Mapping) -> Document:
    title = rec.get("title")
    text = rec.get("text")
    if title is None and "contents" in rec:
        # Search-R1 dump layout: '"Title"\nbody'
        head, _, rest = str(rec["contents"]).partition("\n")
        title, text = head.strip().strip('"'), rest
    if title is None or text is None:
        raise KeyError("record needs title+text or contents")
    title, text = str(title), str(text)
    doc_id = rec.get("id")
    doc_id = str(doc_id) if doc_id not in (None, "") else content_digest(title, text)
    return Document(doc_id, title, text)


def ingest_corpus(source_uri: str | Path) -> Corpus:
    """Read a line-delimited JSON corpus of ``{id, title, text}`` records."""
    path = Path(source_uri)
    docs = []
    seen = set()
    try:
        fh = path.open(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot read corpus {path}: {exc}") from exc
    with fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                doc = _record_to_document(json.loads(line))
            except (json.JSONDecodeError, KeyError, AttributeError, TypeError) as exc:
                raise ParseError(line_no, str(exc)) from exc
            if doc.doc_id in seen:
                raise DuplicateId(doc.doc_id)
            seen.add(doc.doc_id)
            docs.append(doc)
    return Corpus(tuple(docs), str(path))


def top_k(ranked: RankedRetrieval, k: int) -> list[Document]:
    if k < 1:
        raise ValueError("k must be >= 1")
    return list(ranked.candidates[:k])


class Retriever(Protocol):
    def retrieve(self, query: str, pool_size: int) -> RankedRetrieval: ...


_TOKEN = re.compile(r"\w+")


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


class BM25Retriever:
    """Okapi BM25 over title + body. Immutable after construction.

    idf uses the non-negative form ``ln(1 + (N - n + 0.5) / (n + 0.5))``.
    Only documents sharing at least one term with the query are returned.
    """

    def __init__(self, corpus: Corpus, k1: float = 1.2, b: float = 0.75):
        if not len(corpus):
            raise EmptyCorpus("cannot index an empty corpus")
        self.corpus = corpus
        self.k1, self.b = k1, b
        self._docs = corpus.documents
        self._lengths = []
        self._postings: dict[str, list[tuple[int, int]]] = defaultdict(list)
        for i, doc in enumerate(self._docs):
            tf = Counter(tokenize(f"{doc.title} {doc.body}"))
            self._lengths.append(sum(tf.values()))
            for term, f in tf.items():
                self._postings[term].append((i, f))
        n = len(self._docs)
        self.avgdl = sum(self._lengths) / n or 1.0
        self._idf = {t: math.log(1 + (n - len(p) + 0.5) / (len(p) + 0.5)) for t, p in self._postings.items()}

    def scores(self, query: str) -> dict[int, float]:
        acc: dict[int, float] = {}
        for term in tokenize(query):
            idf = self._idf.get(term)
            if idf is None:
                continue
            for i, f in self._postings[term]:
                norm = self.k1 * (1 - self.b + self.b * self._lengths[i] / self.avgdl)
                acc[i] = acc.get(i, 0.0) + idf * f * (self.k1 + 1) / (f + norm)
        return acc

    def retrieve(self, query: str, pool_size: int) -> RankedRetrieval:
        if pool_size < 1:
            raise ValueError("pool_size must be >= 1")
        hits = [
            Document(self._docs[i].doc_id, self._docs[i].title, self._docs[i].body, s)
            for i, s in self.scores(query).items()
        ]
        hits.sort(key=_rank_key)
        return RankedRetrieval(query, tuple(hits[:pool_size]), pool_size)


@dataclass
class FieldMap:
    """Names used by a remote retrieval service's response items."""

    results: str = "result"
    document: str | None = "document"
    doc_id: tuple[str, ...] = ("id", "doc_id", "document_id")
    title: str = "title"
    text: str = "text"
    contents: str = "contents"
    score: str = "score"


@dataclass
class RemoteRetriever:
    """Client for a Search-R1 style ``POST /retrieve`` service.

    Request: ``{"queries": [q], "topk": pool_size, "return_scores": true}``.
    Response: ``{"result": [[{"document": {"id", "contents"}, "score"}, ...]]}``;
    naming differences are absorbed by ``field_map``.
    """

    url: str
    field_map: FieldMap = field(default_factory=FieldMap)
    timeout: float = 30.0
    max_retries: int = 2
    limiter: RequestLimiter = DEFAULT_LIMITER
    transport: httpx.BaseTransport | None = None

    def __post_init__(self):
        self._client = httpx.Client(timeout=self.timeout, transport=self.transport)

    def retrieve(self, query: str, pool_size: int) -> RankedRetrieval:
        if pool_size < 1:
            raise ValueError("pool_size must be >= 1")
        payload = {"queries": [query], "topk": pool_size, "return_scores": True}
        error = None
        for _ in range(self.max_retries + 1):
            try:
                with self.limiter:
                    resp = self._client.post(self.url, json=payload)
                if resp.status_code >= 400:
                    error = f"status {resp.status_code}"
                    continue
                items = resp.json()[self.field_map.results][0]
                return self._to_ranked(query, items, pool_size)
            except httpx.HTTPError as exc:
                error = str(exc) or type(exc).__name__
            except (KeyError, IndexError, TypeError, ValueError) as exc:
                raise RetrieverUnavailable(f"malformed retrieval response: {exc!r}") from exc
        raise RetrieverUnavailable(f"retrieval service failed: {error}")

    def _to_ranked(self, query: str, items: Sequence, pool_size: int) -> RankedRetrieval:
        fm = self.field_map
        docs: dict[str, Document] = {}
        for rank, item in enumerate(items):
            rec = dict(item)
            score = float(rec.get(fm.score, -rank))
            if fm.document and isinstance(rec.get(fm.document), Mapping):
                rec = {**rec[fm.document], **{k: v for k, v in rec.items() if k != fm.document}}
            record = {"id": next((rec[k] for k in fm.doc_id if rec.get(k) not in (None, "")), None)}
            if fm.title in rec and fm.text in rec:
                record.update(title=rec[fm.title], text=rec[fm.text])
            else:
                record["contents"] = rec[fm.contents]
            d = _record_to_document(record)
            if d.doc_id not in docs:
                docs[d.doc_id] = Document(d.doc_id, d.title, d.body, score)
        ranked = sorted(docs.values(), key=_rank_key)[:pool_size]
        return RankedRetrieval(query, tuple(ranked), pool_size)
