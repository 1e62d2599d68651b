"""Filtering generated queries by likelihood and assembling training triples.

Queries are ranked by their mean token log-probability; the top K survive.
Each kept query is paired with its source document as the positive and a
BM25-mined document as the negative.
"""
from __future__ import annotations

import hashlib
import logging
import random
from dataclasses import dataclass
from pathlib import Path

from .errors import CorpusTooSmall, EmptyTokenList, IoFailure, MalformedRecord
from .generator import GeneratedQuery, GenerationSet
from .lexindex import InvertedIndex, search

log = logging.getLogger(__name__)

DEFAULT_TOP_K = 10_000
DEFAULT_NEGATIVE_POOL = 1_000


@dataclass(frozen=True)
class CurationConfig:
    top_k: int = DEFAULT_TOP_K
    negative_pool_size: int = DEFAULT_NEGATIVE_POOL
    seed: int = 0

    def __post_init__(self):
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.negative_pool_size < 2:
            raise ValueError("negative_pool_size must be >= 2")


@dataclass(frozen=True)
class TrainingTriple:
    query: str
    positive_doc_id: str
    negative_doc_id: str
    p_q: float

    def __post_init__(self):
        if self.positive_doc_id == self.negative_doc_id:
            raise ValueError("positive and negative documents must differ")
        if self.p_q > 0:
            raise ValueError("p_q must be <= 0")


@dataclass(frozen=True)
class OverlapStats:
    generated_unique: int
    matched: int
    match_rate: float
    sample_matches: tuple[str, ...]


def mean_logprob(gq: GeneratedQuery) -> float:
    """Mean per-token log-probability of the generated question."""
    if not gq.token_logprobs:
        raise EmptyTokenList("query has no token log-probabilities")
    return sum(gq.token_logprobs) / len(gq.token_logprobs)


def select_top_k(gen_set: GenerationSet, k: int) -> GenerationSet:
    """Keep the k queries with highest mean log-probability.

    Ties break by ascending doc_id; the output is sorted by descending
    mean_logprob then doc_id, so selection is idempotent.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    ordered = sorted(gen_set.queries, key=lambda q: (-q.mean_logprob, q.doc_id))
    return GenerationSet(
        queries=ordered[:k],
        failures=list(gen_set.failures),
        n_requested=gen_set.n_requested,
    )


def _triple_rng(seed: int, salt: str) -> random.Random:
    digest = hashlib.sha256(f"{seed}\x1f{salt}".encode("utf-8")).digest()
    return random.Random(int.from_bytes(digest[:8], "big"))


def mine_negative(
    index: InvertedIndex,
    query: str,
    positive_doc_id: str,
    pool_size: int = DEFAULT_NEGATIVE_POOL,
    seed: int = 0,
    salt: str = "",
) -> str:
    """Pick a negative document for a query from its BM25 candidate pool.

    The positive document is removed from the pool first. Seeding is salted
    per triple so negatives are independent of processing order. When the
    pool is empty the negative falls back to a uniformly random corpus
    document other than the positive.
    """
    doc_id, _ = _mine_negative_detail(index, query, positive_doc_id, pool_size, seed, salt)
    return doc_id


def _mine_negative_detail(
    index: InvertedIndex,
    query: str,
    positive_doc_id: str,
    pool_size: int,
    seed: int,
    salt: str,
) -> tuple[str, bool]:
    """Returns (negative_doc_id, from_pool)."""
    if index.doc_count < 2:
        raise CorpusTooSmall("need at least 2 documents to mine a negative")
    rng = _triple_rng(seed, salt)
    pool = [doc_id for doc_id, _ in search(index, query, pool_size)
            if doc_id != positive_doc_id]
    if pool:
        return pool[rng.randrange(len(pool))], True
    everything = sorted(d for d in index.doc_lengths if d != positive_doc_id)
    return everything[rng.randrange(len(everything))], False


def build_triples(
    gen_set: GenerationSet,
    index: InvertedIndex,
    config: CurationConfig = CurationConfig(),
    stats: dict | None = None,
) -> list[TrainingTriple]:
    """Top-k filter the generation set and mine one negative per kept query.

    Output order follows select_top_k. When given, `stats` is filled with
    kept/fallback counters for run summaries.
    """
    kept = select_top_k(gen_set, config.top_k)
    triples: list[TrainingTriple] = []
    n_fallback = 0
    for gq in kept.queries:
        negative, from_pool = _mine_negative_detail(
            index, gq.question, gq.doc_id, config.negative_pool_size,
            config.seed, salt=gq.doc_id,
        )
        if not from_pool:
            n_fallback += 1
            log.warning(
                "negative pool empty for doc %s; fell back to random corpus doc %s",
                gq.doc_id, negative,
            )
        triples.append(
            TrainingTriple(
                query=gq.question,
                positive_doc_id=gq.doc_id,
                negative_doc_id=negative,
                p_q=gq.mean_logprob,
            )
        )
    if stats is not None:
        stats["n_kept"] = len(kept.queries)
        stats["n_fallback"] = n_fallback
    return triples


def write_triples(triples: list[TrainingTriple], path: str | Path) -> None:
    """TSV: query, positive_doc_id, negative_doc_id, p_q (6 decimal places)."""
    try:
        with open(path, "w", encoding="utf-8") as fh:
            for triple in triples:
                fh.write(
                    f"{triple.query}\t{triple.positive_doc_id}\t"
                    f"{triple.negative_doc_id}\t{triple.p_q:.6f}\n"
                )
    except OSError as exc:
        raise IoFailure(f"cannot write triples {path}: {exc}") from exc


def read_triples(path: str | Path) -> list[TrainingTriple]:
    triples = []
    try:
        with open(path, encoding="utf-8") as fh:
            for line_number, raw in enumerate(fh, start=1):
                line = raw.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 4:
                    raise MalformedRecord(line_number, "expected 4 tab-separated fields")
                query, positive, negative, p_q = parts
                try:
                    triples.append(TrainingTriple(query, positive, negative, float(p_q)))
                except ValueError as exc:
                    raise MalformedRecord(line_number, str(exc)) from exc
    except OSError as exc:
        raise IoFailure(f"cannot read triples {path}: {exc}") from exc
    return triples


def normalize_question(text: str) -> str:
    """Case-fold, collapse whitespace, and drop any trailing question marks."""
    collapsed = " ".join(text.lower().split())
    return collapsed.rstrip("?").strip()


def overlap_report(
    gen_set: GenerationSet, reference_queries: list[str], sample_limit: int = 20
) -> OverlapStats:
    """Exact-match overlap between generated and reference questions after
    normalization. Used to probe whether generated questions merely repeat
    the reference set."""
    generated = {normalize_question(q.question) for q in gen_set.queries}
    reference = {normalize_question(q) for q in reference_queries}
    matches = sorted(generated & reference)
    generated_unique = len(generated)
    return OverlapStats(
        generated_unique=generated_unique,
        matched=len(matches),
        match_rate=len(matches) / max(generated_unique, 1),
        sample_matches=tuple(matches[:sample_limit]),
    )


def read_reference_queries(path: str | Path) -> list[str]:
    """One query per line, UTF-8; blank lines are skipped."""
    try:
        with open(path, encoding="utf-8") as fh:
            return [line.rstrip("\n") for line in fh if line.strip()]
    except OSError as exc:
        raise IoFailure(f"cannot read reference queries {path}: {exc}") from exc
