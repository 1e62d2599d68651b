"""Second-stage reranking with MaxP long-document handling, ranking metrics,
and TREC-format run/qrels handling.

Rerankers are pluggable scorers over (query, passage) pairs. Long documents
are segmented into overlapping sentence windows and a document scores as the
maximum over its passages; first-stage scores are never blended in.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import requests

from .corpus import Corpus, Document, presentation_text
from .errors import (
    BackendProtocolError,
    BackendUnavailable,
    EmptyDocument,
    IoFailure,
    MalformedRecord,
    UnknownDocId,
    UnknownMetric,
)
from .lexindex import Ranking, rank_entries, tokenize

DEFAULT_WINDOW = 10
DEFAULT_STRIDE = 5
DEFAULT_REL_THRESHOLD = 1
DEFAULT_RUN_TAG = "inpars"

_TERMINATORS = ".?!"


def segment_sentences(text: str) -> list[str]:
    """Split on '.', '?' or '!' followed by whitespace or end of text.

    Terminators stay with their sentence; empty segments are dropped.
    """
    sentences: list[str] = []
    start = 0
    for i, ch in enumerate(text):
        if ch in _TERMINATORS and (i + 1 == len(text) or text[i + 1].isspace()):
            sentence = text[start:i + 1].strip()
            if sentence:
                sentences.append(sentence)
            start = i + 1
    tail = text[start:].strip()
    if tail:
        sentences.append(tail)
    return sentences


def maxp_passages(
    doc_text: str, window: int = DEFAULT_WINDOW, stride: int = DEFAULT_STRIDE
) -> list[str]:
    """Overlapping sentence windows: one passage per stride offset below the
    sentence count, or a single passage when the document fits the window."""
    if window < 1:
        raise ValueError("window must be >= 1")
    if not 1 <= stride <= window:
        raise ValueError("stride must satisfy 1 <= stride <= window")
    sentences = segment_sentences(doc_text)
    n = len(sentences)
    if n == 0:
        return []
    if n <= window:
        return [" ".join(sentences)]
    return [" ".join(sentences[start:start + window]) for start in range(0, n, stride)]


class RerankScorer:
    """Scorer contract: score_passage returns a relevance in [0, 1] and is
    deterministic for fixed inputs. Scorers that cannot take concurrent
    score_passage calls set concurrent_safe = False and runners must honor
    it."""

    concurrent_safe = True

    def score_passage(self, query: str, passage: str) -> float:
        raise NotImplementedError

    def score_passages(self, query: str, passages: list[str]) -> list[float]:
        return [self.score_passage(query, passage) for passage in passages]


class LexicalScorer(RerankScorer):
    """Token-overlap F1 between query and passage; dependency-free."""

    def score_passage(self, query: str, passage: str) -> float:
        q_tokens = tokenize(query)
        p_tokens = tokenize(passage)
        if not q_tokens or not p_tokens:
            return 0.0
        q_counts: dict[str, int] = {}
        for token in q_tokens:
            q_counts[token] = q_counts.get(token, 0) + 1
        overlap = 0
        for token in p_tokens:
            if q_counts.get(token, 0) > 0:
                q_counts[token] -= 1
                overlap += 1
        if overlap == 0:
            return 0.0
        precision = overlap / len(p_tokens)
        recall = overlap / len(q_tokens)
        return 2 * precision * recall / (precision + recall)


class FirstStageScorer(RerankScorer):
    """Identity passthrough: keeps the first-stage (BM25) order unchanged."""

    def score_passage(self, query: str, passage: str) -> float:
        raise NotImplementedError("first-stage passthrough never scores passages")


class RemoteScorer(RerankScorer):
    """Remote scoring endpoint: POST {query, passages} and receive one real
    in [0, 1] per passage, in order."""

    def __init__(self, endpoint: str, timeout: float = 60.0, session=None):
        self.endpoint = endpoint
        self.timeout = timeout
        self._session = session or requests.Session()

    def score_passage(self, query: str, passage: str) -> float:
        return self.score_passages(query, [passage])[0]

    def score_passages(self, query: str, passages: list[str]) -> list[float]:
        try:
            response = self._session.post(
                self.endpoint,
                json={"query": query, "passages": passages},
                timeout=self.timeout,
            )
        except requests.RequestException as exc:
            raise BackendUnavailable(str(exc)) from exc
        if response.status_code >= 500:
            raise BackendUnavailable(f"HTTP {response.status_code}")
        if response.status_code != 200:
            raise BackendProtocolError(f"HTTP {response.status_code}: {response.text[:200]}")
        try:
            scores = response.json()
        except ValueError as exc:
            raise BackendProtocolError("scorer response is not JSON") from exc
        if not isinstance(scores, list) or len(scores) != len(passages):
            raise BackendProtocolError("scorer must return one score per passage")
        result = []
        for value in scores:
            if not isinstance(value, (int, float)) or not 0.0 <= value <= 1.0:
                raise BackendProtocolError(f"scorer returned out-of-range value: {value!r}")
            result.append(float(value))
        return result


def score_document(
    scorer: RerankScorer,
    query: str,
    doc: Document,
    window: int = DEFAULT_WINDOW,
    stride: int = DEFAULT_STRIDE,
) -> float:
    """Maximum passage score over the document's MaxP windows; first-stage
    retrieval scores are not blended in."""
    text = presentation_text(doc)
    passages = maxp_passages(text, window=window, stride=stride) if text else []
    if not passages:
        raise EmptyDocument(doc.doc_id)
    return max(scorer.score_passages(query, passages))


def rerank(
    scorer: RerankScorer,
    query_id: str,
    query: str,
    candidates: Ranking,
    corpus: Corpus,
    window: int = DEFAULT_WINDOW,
    stride: int = DEFAULT_STRIDE,
) -> Ranking:
    """Rescore every candidate document and re-sort; the candidate set is
    unchanged."""
    for doc_id, _ in candidates:
        if doc_id not in corpus:
            raise UnknownDocId(doc_id)
    if isinstance(scorer, FirstStageScorer):
        return Ranking(query_id=query_id, entries=list(candidates.entries))
    rescored = [
        (doc_id, score_document(scorer, query, corpus.get(doc_id), window, stride))
        for doc_id, _ in candidates
    ]
    return Ranking(query_id=query_id, entries=rank_entries(rescored))


class Qrels:
    """Graded relevance judgments keyed by (query_id, doc_id)."""

    def __init__(self, judgments: dict[str, dict[str, int]]):
        self._judgments = judgments

    @property
    def query_ids(self) -> list[str]:
        return sorted(self._judgments.keys())

    def grade(self, query_id: str, doc_id: str) -> int:
        return self._judgments.get(query_id, {}).get(doc_id, 0)

    def grades_for(self, query_id: str) -> dict[str, int]:
        return dict(self._judgments.get(query_id, {}))

    def relevant_count(self, query_id: str, rel_threshold: int = DEFAULT_REL_THRESHOLD) -> int:
        return sum(
            1 for grade in self._judgments.get(query_id, {}).values()
            if grade >= rel_threshold
        )

    def __contains__(self, query_id: str) -> bool:
        return query_id in self._judgments

    def __len__(self) -> int:
        return len(self._judgments)


def read_qrels(path: str | Path) -> Qrels:
    """TREC qrels: whitespace-separated `query_id 0 doc_id grade` lines."""
    judgments: dict[str, dict[str, int]] = {}
    try:
        with open(path, encoding="utf-8") as fh:
            for line_number, raw in enumerate(fh, start=1):
                line = raw.strip()
                if not line:
                    continue
                parts = line.split()
                if len(parts) != 4:
                    raise MalformedRecord(line_number, "expected 4 whitespace-separated fields")
                query_id, _, doc_id, grade_text = parts
                try:
                    grade = int(grade_text)
                except ValueError as exc:
                    raise MalformedRecord(line_number, "grade must be an integer") from exc
                if grade < 0:
                    raise MalformedRecord(line_number, "grade must be >= 0")
                per_query = judgments.setdefault(query_id, {})
                if doc_id in per_query:
                    raise MalformedRecord(
                        line_number, f"duplicate judgment for ({query_id}, {doc_id})"
                    )
                per_query[doc_id] = grade
    except OSError as exc:
        raise IoFailure(f"cannot read qrels {path}: {exc}") from exc
    return Qrels(judgments)


def read_queries(path: str | Path) -> list[tuple[str, str]]:
    """TSV queries file: `query_id<TAB>query_text`, order preserved."""
    queries: list[tuple[str, str]] = []
    seen: set[str] = set()
    try:
        with open(path, encoding="utf-8") as fh:
            for line_number, raw in enumerate(fh, start=1):
                line = raw.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t", 1)
                if len(parts) != 2 or not parts[0]:
                    raise MalformedRecord(line_number, "expected 'query_id<TAB>query_text'")
                query_id, text = parts
                if query_id in seen:
                    raise MalformedRecord(line_number, f"duplicate query_id {query_id!r}")
                seen.add(query_id)
                queries.append((query_id, text))
    except OSError as exc:
        raise IoFailure(f"cannot read queries {path}: {exc}") from exc
    return queries


def write_run(run: dict[str, Ranking], path: str | Path, tag: str = DEFAULT_RUN_TAG) -> None:
    """TREC run file: `query_id Q0 doc_id rank score tag` rows sorted by
    query_id then rank; byte-deterministic for fixed inputs."""
    try:
        with open(path, "w", encoding="utf-8") as fh:
            for query_id in sorted(run.keys()):
                for rank, (doc_id, score) in enumerate(run[query_id].entries, start=1):
                    fh.write(f"{query_id} Q0 {doc_id} {rank} {score:.6f} {tag}\n")
    except OSError as exc:
        raise IoFailure(f"cannot write run {path}: {exc}") from exc


def read_run(path: str | Path) -> dict[str, Ranking]:
    rows: dict[str, list[tuple[int, str, float]]] = {}
    try:
        with open(path, encoding="utf-8") as fh:
            for line_number, raw in enumerate(fh, start=1):
                line = raw.strip()
                if not line:
                    continue
                parts = line.split()
                if len(parts) != 6:
                    raise MalformedRecord(line_number, "expected 6 whitespace-separated fields")
                query_id, _, doc_id, rank_text, score_text, _ = parts
                try:
                    rows.setdefault(query_id, []).append(
                        (int(rank_text), doc_id, float(score_text))
                    )
                except ValueError as exc:
                    raise MalformedRecord(line_number, "bad rank or score") from exc
    except OSError as exc:
        raise IoFailure(f"cannot read run {path}: {exc}") from exc
    run: dict[str, Ranking] = {}
    for query_id, entries in rows.items():
        entries.sort(key=lambda row: row[0])
        run[query_id] = Ranking(
            query_id=query_id, entries=[(doc_id, score) for _, doc_id, score in entries]
        )
    return run


def mrr_at_k(
    ranking: Ranking,
    qrels: Qrels,
    k: int = 10,
    rel_threshold: int = DEFAULT_REL_THRESHOLD,
) -> float:
    """Reciprocal rank of the first relevant document within the top k."""
    if k < 1:
        raise ValueError("k must be >= 1")
    for rank, (doc_id, _) in enumerate(ranking.entries[:k], start=1):
        if qrels.grade(ranking.query_id, doc_id) >= rel_threshold:
            return 1.0 / rank
    return 0.0


def average_precision(
    ranking: Ranking, qrels: Qrels, rel_threshold: int = DEFAULT_REL_THRESHOLD
) -> float:
    """Mean precision at relevant ranks, normalized by the total number of
    relevant documents in the qrels (not just those retrieved)."""
    total_relevant = qrels.relevant_count(ranking.query_id, rel_threshold)
    if total_relevant == 0:
        return 0.0
    hits = 0
    precision_sum = 0.0
    for rank, (doc_id, _) in enumerate(ranking.entries, start=1):
        if qrels.grade(ranking.query_id, doc_id) >= rel_threshold:
            hits += 1
            precision_sum += hits / rank
    return precision_sum / total_relevant


def _gain(grade: int, exponential: bool) -> float:
    return float(2 ** grade - 1) if exponential else float(grade)


def ndcg_at_k(
    ranking: Ranking, qrels: Qrels, k: int, exponential_gain: bool = True
) -> float:
    """nDCG with exponential gain (2^grade - 1) by default; linear gain is
    available for cross-checking against other evaluators."""
    if k < 1:
        raise ValueError("k must be >= 1")
    dcg = 0.0
    for rank, (doc_id, _) in enumerate(ranking.entries[:k], start=1):
        grade = qrels.grade(ranking.query_id, doc_id)
        dcg += _gain(grade, exponential_gain) / math.log2(rank + 1)
    ideal_grades = sorted(qrels.grades_for(ranking.query_id).values(), reverse=True)
    idcg = 0.0
    for rank, grade in enumerate(ideal_grades[:k], start=1):
        idcg += _gain(grade, exponential_gain) / math.log2(rank + 1)
    if idcg == 0.0:
        return 0.0
    return dcg / idcg


def recall_at_k(
    ranking: Ranking,
    qrels: Qrels,
    k: int,
    rel_threshold: int = DEFAULT_REL_THRESHOLD,
) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    total_relevant = qrels.relevant_count(ranking.query_id, rel_threshold)
    if total_relevant == 0:
        return 0.0
    found = sum(
        1 for doc_id, _ in ranking.entries[:k]
        if qrels.grade(ranking.query_id, doc_id) >= rel_threshold
    )
    return found / total_relevant


VALID_METRICS = ("mrr", "map", "ndcg", "recall")


def parse_metric(name: str) -> tuple[str, int | None]:
    """Split a metric name like 'ndcg@10' into its kind and cutoff."""
    base, at, cutoff = name.partition("@")
    base = base.strip().lower()
    if base not in VALID_METRICS:
        raise UnknownMetric(name)
    if base == "map":
        if at:
            raise UnknownMetric(name)
        return base, None
    if not at:
        raise UnknownMetric(name)
    try:
        k = int(cutoff)
    except ValueError:
        raise UnknownMetric(name) from None
    if k < 1:
        raise UnknownMetric(name)
    return base, k


@dataclass
class MetricsReport:
    """Aggregate metric values plus the per-query breakdown."""

    aggregates: dict[str, float]
    per_query: dict[str, dict[str, float]]
    n_queries: int

    def to_dict(self) -> dict:
        return {
            "metrics": self.aggregates,
            "n_queries": self.n_queries,
            "per_query": self.per_query,
        }

    def save(self, path: str | Path) -> None:
        try:
            with open(path, "w", encoding="utf-8") as fh:
                json.dump(self.to_dict(), fh, sort_keys=True, indent=2)
                fh.write("\n")
        except OSError as exc:
            raise IoFailure(f"cannot write metrics {path}: {exc}") from exc


def evaluate(
    run: dict[str, Ranking],
    qrels: Qrels,
    metrics: list[str] = ("mrr@10", "map", "ndcg@10"),
    rel_threshold: int = DEFAULT_REL_THRESHOLD,
    exponential_gain: bool = True,
) -> MetricsReport:
    """Per-query metrics averaged over every query in the qrels.

    Queries judged in the qrels but missing from the run score 0; run
    queries without judgments are ignored.
    """
    parsed = [(name, *parse_metric(name)) for name in metrics]
    per_query: dict[str, dict[str, float]] = {name: {} for name in metrics}
    for query_id in qrels.query_ids:
        ranking = run.get(query_id, Ranking(query_id=query_id, entries=[]))
        for name, kind, k in parsed:
            if kind == "mrr":
                value = mrr_at_k(ranking, qrels, k, rel_threshold)
            elif kind == "map":
                value = average_precision(ranking, qrels, rel_threshold)
            elif kind == "ndcg":
                value = ndcg_at_k(ranking, qrels, k, exponential_gain)
            else:
                value = recall_at_k(ranking, qrels, k, rel_threshold)
            per_query[name][query_id] = value
    n_queries = len(qrels)
    aggregates = {
        name: (sum(values.values()) / n_queries if n_queries else 0.0)
        for name, values in per_query.items()
    }
    return MetricsReport(aggregates=aggregates, per_query=per_query, n_queries=n_queries)


SCORER_KINDS = ("lexical", "remote", "firststage")


def make_scorer(kind: str, endpoint: str | None = None) -> RerankScorer:
    """Factory for the built-in scorer kinds."""
    if kind == "lexical":
        return LexicalScorer()
    if kind == "firststage":
        return FirstStageScorer()
    if kind == "remote":
        if not endpoint:
            raise ValueError("remote scorer needs an endpoint")
        return RemoteScorer(endpoint)
    raise ValueError(f"unknown scorer kind: {kind!r}")
