"""Per-episode seen-document filtering."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

from .retriever import Document, RankedRetrieval


@dataclass(frozen=True)
class SeenSet:
    episode_id: str
    ids: frozenset[str] = frozenset()

    def __contains__(self, doc_id: str) -> bool:
        return doc_id in self.ids

    def __len__(self) -> int:
        return len(self.ids)


def filter_unseen(ranked: RankedRetrieval, seen: SeenSet, k: int) -> list[Document]:
    """First ``k`` candidates whose id is not in ``seen``, in rank order."""
    if k < 1:
        raise ValueError("k must be >= 1")
    out = []
    for doc in ranked.candidates:
        if doc.doc_id in seen.ids:
            continue
        out.append(doc)
        if len(out) == k:
            break
    return out


def count_skipped(ranked: RankedRetrieval, seen: SeenSet, shown: list[Document], k: int) -> int:
    """Number of seen candidates passed over while collecting ``shown``."""
    if len(shown) < k:
        return sum(d.doc_id in seen.ids for d in ranked.candidates)
    last = shown[-1].doc_id
    skipped = 0
    for doc in ranked.candidates:
        if doc.doc_id == last:
            break
        skipped += doc.doc_id in seen.ids
    return skipped


def mark_seen(seen: SeenSet, documents: Iterable[Document]) -> SeenSet:
    ids = seen.ids | {d.doc_id for d in documents}
    if len(ids) == len(seen.ids):
        return seen
    return SeenSet(seen.episode_id, frozenset(ids))
