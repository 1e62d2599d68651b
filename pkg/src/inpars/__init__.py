"""Synthetic query generation, likelihood filtering, and multi-stage
retrieval evaluation over unlabeled document collections."""

__version__ = "0.1.0"

from .corpus import Corpus, Document, ingest, presentation_text, sample_documents
from .curation import (
    CurationConfig,
    TrainingTriple,
    build_triples,
    mean_logprob,
    mine_negative,
    overlap_report,
    select_top_k,
)
from .generator import (
    Completion,
    CompletionBackend,
    CompletionRequest,
    GeneratedQuery,
    GenerationSet,
    MockBackend,
    RemoteBackend,
    generate_for_document,
    run_generation,
)
from .lexindex import InvertedIndex, Ranking, bm25_score, build_index, search, tokenize
from .promptkit import FewShotExample, PromptTemplate, load_examples, render_prompt
from .rerankeval import (
    LexicalScorer,
    MetricsReport,
    Qrels,
    RemoteScorer,
    RerankScorer,
    average_precision,
    evaluate,
    maxp_passages,
    mrr_at_k,
    ndcg_at_k,
    rerank,
    score_document,
    segment_sentences,
)

__all__ = [
    "Corpus",
    "Document",
    "ingest",
    "presentation_text",
    "sample_documents",
    "CurationConfig",
    "TrainingTriple",
    "build_triples",
    "mean_logprob",
    "mine_negative",
    "overlap_report",
    "select_top_k",
    "Completion",
    "CompletionBackend",
    "CompletionRequest",
    "GeneratedQuery",
    "GenerationSet",
    "MockBackend",
    "RemoteBackend",
    "generate_for_document",
    "run_generation",
    "InvertedIndex",
    "Ranking",
    "bm25_score",
    "build_index",
    "search",
    "tokenize",
    "FewShotExample",
    "PromptTemplate",
    "load_examples",
    "render_prompt",
    "LexicalScorer",
    "MetricsReport",
    "Qrels",
    "RemoteScorer",
    "RerankScorer",
    "average_precision",
    "evaluate",
    "maxp_passages",
    "mrr_at_k",
    "ndcg_at_k",
    "rerank",
    "score_document",
    "segment_sentences",
]
