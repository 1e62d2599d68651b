"""Inverted index with Okapi BM25 scoring and top-k first-stage retrieval.

The analyzer is a plain alphanumeric lowercaser (no stemming, no stopwords)
so results are reproducible and dependency-free. Defaults k1=0.9, b=0.4 match
the Lucene-style BM25 variant with idf = ln(1 + (N - df + 0.5) / (df + 0.5)).
"""
from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

from .corpus import Corpus, presentation_text
from .errors import EmptyCorpus, IoFailure, UnknownDocId

DEFAULT_K1 = 0.9
DEFAULT_B = 0.4

# maximal runs of (unicode) alphanumerics; underscore is a separator
_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)


def tokenize(text: str) -> list[str]:
    """Lowercase and split into maximal alphanumeric runs."""
    return _TOKEN_RE.findall(text.lower())


@dataclass
class Ranking:
    """Ordered (doc_id, score) list for one query.

    Scores are non-increasing; ties are broken by ascending doc_id; ranks
    are 1-based.
    """

    query_id: str
    entries: list[tuple[str, float]] = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for doc_id, _ in self.entries:
            if doc_id in seen:
                raise ValueError(f"duplicate doc_id in ranking: {doc_id!r}")
            seen.add(doc_id)

    def doc_ids(self) -> list[str]:
        return [doc_id for doc_id, _ in self.entries]

    def rank_of(self, doc_id: str) -> int | None:
        for rank, (candidate, _) in enumerate(self.entries, start=1):
            if candidate == doc_id:
                return rank
        return None

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)


def rank_entries(scored: list[tuple[str, float]]) -> list[tuple[str, float]]:
    """Sort (doc_id, score) pairs by descending score, ascending doc_id."""
    return sorted(scored, key=lambda item: (-item[1], item[0]))


class InvertedIndex:
    """Immutable term -> postings map with BM25 scoring state."""

    def __init__(
        self,
        postings: dict[str, list[tuple[str, int]]],
        doc_lengths: dict[str, int],
        k1: float = DEFAULT_K1,
        b: float = DEFAULT_B,
    ):
        self.postings = postings
        self.doc_lengths = doc_lengths
        self.doc_count = len(doc_lengths)
        self.avg_doc_length = (
            sum(doc_lengths.values()) / self.doc_count if self.doc_count else 0.0
        )
        self.k1 = k1
        self.b = b

    def idf(self, term: str) -> float:
        df = len(self.postings.get(term, ()))
        if df == 0:
            return 0.0
        return math.log(1.0 + (self.doc_count - df + 0.5) / (df + 0.5))

    def _term_weight(self, term: str, tf: int, doc_length: int) -> float:
        norm = self.k1 * (1.0 - self.b + self.b * doc_length / self.avg_doc_length)
        return self.idf(term) * tf * (self.k1 + 1.0) / (tf + norm)


def build_index(
    corpus: Corpus, k1: float = DEFAULT_K1, b: float = DEFAULT_B
) -> InvertedIndex:
    """Index the presentation text of every document in the corpus."""
    if len(corpus) == 0:
        raise EmptyCorpus("cannot index an empty corpus")
    postings: dict[str, list[tuple[str, int]]] = {}
    doc_lengths: dict[str, int] = {}
    for doc in corpus:
        tokens = tokenize(presentation_text(doc))
        doc_lengths[doc.doc_id] = len(tokens)
        for term, tf in Counter(tokens).items():
            postings.setdefault(term, []).append((doc.doc_id, tf))
    for plist in postings.values():
        plist.sort(key=lambda entry: entry[0])
    return InvertedIndex(postings, doc_lengths, k1=k1, b=b)


def bm25_score(index: InvertedIndex, query_tokens: list[str], doc_id: str) -> float:
    """Okapi BM25 score of one document for a tokenized query.

    Repeated query terms contribute once per occurrence; terms absent from
    the document contribute 0.
    """
    if doc_id not in index.doc_lengths:
        raise UnknownDocId(doc_id)
    doc_length = index.doc_lengths[doc_id]
    score = 0.0
    for term in query_tokens:
        plist = index.postings.get(term)
        if not plist:
            continue
        tf = _postings_tf(plist, doc_id)
        if tf == 0:
            continue
        score += index._term_weight(term, tf, doc_length)
    return score


def _postings_tf(plist: list[tuple[str, int]], doc_id: str) -> int:
    # postings are sorted by doc_id, so binary search
    lo, hi = 0, len(plist)
    while lo < hi:
        mid = (lo + hi) // 2
        if plist[mid][0] < doc_id:
            lo = mid + 1
        else:
            hi = mid
    if lo < len(plist) and plist[lo][0] == doc_id:
        return plist[lo][1]
    return 0


def search(index: InvertedIndex, query: str, k: int, query_id: str = "") -> Ranking:
    """Top-k documents by BM25 for the query; zero-score documents excluded.

    Accumulation visits query terms in query order so scores are bit-equal
    to summing bm25_score term contributions in the same order.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    scores: dict[str, float] = {}
    for term in tokenize(query):
        plist = index.postings.get(term)
        if not plist:
            continue
        for doc_id, tf in plist:
            weight = index._term_weight(term, tf, index.doc_lengths[doc_id])
            scores[doc_id] = scores.get(doc_id, 0.0) + weight
    ranked = rank_entries([(doc_id, s) for doc_id, s in scores.items() if s != 0.0])
    return Ranking(query_id=query_id, entries=ranked[:k])


def save_index(index: InvertedIndex, path: str | Path) -> None:
    """Write a self-describing snapshot; load(save(idx)) searches identically."""
    payload = {
        "format": "inpars-index",
        "version": 1,
        "k1": index.k1,
        "b": index.b,
        "doc_lengths": index.doc_lengths,
        "postings": {term: [[d, tf] for d, tf in plist]
                     for term, plist in index.postings.items()},
    }
    try:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, ensure_ascii=False, sort_keys=True)
    except OSError as exc:
        raise IoFailure(f"cannot write index {path}: {exc}") from exc


def load_index(path: str | Path) -> InvertedIndex:
    try:
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
    except OSError as exc:
        raise IoFailure(f"cannot read index {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise IoFailure(f"corrupt index snapshot {path}: {exc}") from exc
    if payload.get("format") != "inpars-index":
        raise IoFailure(f"{path} is not an index snapshot")
    postings = {
        term: [(doc_id, tf) for doc_id, tf in plist]
        for term, plist in payload["postings"].items()
    }
    return InvertedIndex(
        postings, payload["doc_lengths"], k1=payload["k1"], b=payload["b"]
    )
