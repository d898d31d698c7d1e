import random
import re
import string

import pytest

from ragloop.protocol import load_templates
from ragloop.retriever import Corpus, Document, RankedRetrieval


def squad_normalize(s):
    """Reference normalizer from the SQuAD v1.1 evaluation script."""

    def remove_articles(text):
        return re.sub(r"\b(a|an|the)\b", " ", text)

    def white_space_fix(text):
        return " ".join(text.split())

    def remove_punc(text):
        exclude = set(string.punctuation)
        return "".join(ch for ch in text if ch not in exclude)

    def lower(text):
        return text.lower()

    return white_space_fix(remove_articles(remove_punc(lower(s))))


@pytest.fixture(scope="session")
def templates():
    return load_templates()


def doc(i, title=None, body="", score=0.0):
    return Document(f"d{i}", title or f"T{i}", body or f"text {i}", score)


def ranked(ids, query="q", pool_size=None):
    docs = tuple(Document(i, f"title {i}", f"body {i}", float(len(ids) - r)) for r, i in enumerate(ids))
    return RankedRetrieval(query, docs, pool_size or max(1, len(ids)))


VOCAB = ["alpha", "beta", "gamma", "delta", "epsilon", "zeta", "eta", "theta", "iota", "kappa", "lambda", "mu"]


def random_corpus(seed, n_docs=30):
    rng = random.Random(seed)
    return Corpus.from_records(
        [{"id": f"doc{i:03d}", "title": f"{rng.choice(VOCAB)} {i}",
          "text": " ".join(rng.choices(VOCAB, k=rng.randint(3, 12)))} for i in range(n_docs)],
        f"random:{seed}",
    )


class DisjointRetriever:
    """Every call returns fresh document ids, so no two searches ever overlap."""

    def __init__(self, per_call=5):
        self.per_call = per_call
        self.calls = 0

    def retrieve(self, query, pool_size):
        self.calls += 1
        n = min(self.per_call, pool_size)
        docs = tuple(Document(f"c{self.calls}-{i}", f"{query} {self.calls}.{i}", f"about {query}", float(n - i)) for i in range(n))
        return RankedRetrieval(query, docs, pool_size)


def random_episode(seed, mode, **config):
    """One mock episode: seeded random searches over a seeded random BM25 corpus."""
    from ragloop.mocks import FaithfulExtractor, RandomReasoner
    from ragloop.orchestrator import EpisodeConfig, PipelineMode, run_episode
    from ragloop.retriever import BM25Retriever

    mode = PipelineMode(mode)
    cfg = EpisodeConfig(mode=mode, **{"max_turns": 6, **config})
    return run_episode(
        f"question {seed}?", ["alpha"], cfg,
        reasoner=RandomReasoner(seed, VOCAB[:5], max_searches=8),
        retriever=BM25Retriever(random_corpus(seed % 50, n_docs=12)),
        extractor=FaithfulExtractor() if mode.extracts else None,
        episode_id=f"ep{seed}",
    )


# (predicted, gold) pairs for the normalization oracle: articles, punctuation,
# case, whitespace, numerals and near misses.
EM_PAIRS = [
    ("The Ed Lee", "ed lee"), ("Ed Lee", "Ed Lee"), ("ed  lee", "Ed Lee"), ("Edwin Lee", "Ed Lee"),
    ("P950.", "p950"), ("950 Pesos", "P950"), ("2", "Two"), ("two", "Two"), ("Two.", "two"),
    ("a cat", "cat"), ("an apple", "apple"), ("The the the", ""), ("theatre", "atre"), ("Anne", "ne"),
    ("The Beatles", "Beatles"), ("Beatles, The", "the beatles"), ("U.S.A.", "usa"), ("U.S.", "US"),
    ("New York City", "new york"), ("new-york", "newyork"), ("New York!", "new york"),
    ("Jeff Sheehy", "Jeff Sheehy"), ("Sheehy", "Jeff Sheehy"), ("  Jeff\tSheehy\n", "jeff sheehy"),
    ("1,000", "1000"), ("1 000", "1000"), ("3.14", "314"), ("$5", "5"), ("50%", "50"),
    ("O'Brien", "OBrien"), ("O’Brien", "OBrien"), ("rock & roll", "rock roll"), ("rock and roll", "rock roll"),
    ("A.", "a"), ("An", "an"), ("THE END", "end"), ("the end.", "End"), ("(Paris)", "paris"),
    ("Paris, France", "Paris France"), ("Paris; France", "paris france"), ("Café", "cafe"), ("Café", "café"),
    ("San Francisco Board of Supervisors", "board of supervisors"), ("Board of Supervisors", "the board of supervisors"),
    ("January 11, 2011", "January 11 2011"), ("Jan. 11, 2011", "January 11, 2011"),
    ("an", ""), ("", ""), ("...", ""), ("A man, a plan", "man plan"),
]
assert len(EM_PAIRS) == 50


ACCEPTANCE_RESULTS: list[tuple[str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else ""))
