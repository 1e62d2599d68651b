"""Tests for top-k filtering, negative mining, triples, and overlap stats."""
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from inpars.corpus import Corpus, Document
from inpars.curation import (
    CurationConfig,
    TrainingTriple,
    build_triples,
    mean_logprob,
    mine_negative,
    normalize_question,
    overlap_report,
    read_reference_queries,
    read_triples,
    select_top_k,
    write_triples,
)
from inpars.errors import CorpusTooSmall, EmptyTokenList
from inpars.generator import GeneratedQuery, GenerationSet
from inpars.lexindex import build_index, search


def make_query(doc_id, logprobs, question=None, mode="vanilla"):
    return GeneratedQuery(
        doc_id=doc_id,
        question=question or f"question about {doc_id}",
        token_logprobs=tuple(logprobs),
        mean_logprob=sum(logprobs) / len(logprobs),
        mode=mode,
    )


class TestMeanLogprob:
    def test_mean(self):
        assert mean_logprob(make_query("d", [-0.5, -1.0, -1.5])) == pytest.approx(-1.0)

    def test_single_token(self):
        assert mean_logprob(make_query("d", [-2.0])) == -2.0

    def test_empty_raises(self):
        query = make_query("d", [-1.0])
        object.__setattr__(query, "token_logprobs", ())
        with pytest.raises(EmptyTokenList):
            mean_logprob(query)


class TestSelectTopK:
    def test_ordering(self):
        gen_set = GenerationSet(queries=[
            make_query("q1", [-0.2]),
            make_query("q2", [-1.0]),
            make_query("q3", [-0.5]),
        ])
        kept = select_top_k(gen_set, 2)
        assert [q.doc_id for q in kept.queries] == ["q1", "q3"]

    def test_saturation(self):
        gen_set = GenerationSet(queries=[make_query("a", [-1.0]), make_query("b", [-0.1])])
        kept = select_top_k(gen_set, 10)
        assert [q.doc_id for q in kept.queries] == ["b", "a"]

    def test_tie_broken_by_doc_id(self):
        gen_set = GenerationSet(queries=[
            make_query("zz", [-0.4]),
            make_query("aa", [-0.4]),
        ])
        kept = select_top_k(gen_set, 1)
        assert kept.queries[0].doc_id == "aa"

    def test_idempotent(self):
        gen_set = GenerationSet(queries=[
            make_query(f"d{i}", [-0.1 * (i + 1)]) for i in range(10)
        ])
        once = select_top_k(gen_set, 4)
        twice = select_top_k(once, 4)
        assert once.queries == twice.queries

    @settings(max_examples=100)
    @given(
        st.lists(
            st.floats(min_value=-8.0, max_value=0.0, allow_nan=False),
            min_size=1, max_size=30,
        ),
        st.integers(min_value=1, max_value=30),
    )
    def test_min_kept_at_least_max_discarded(self, means, k):
        gen_set = GenerationSet(queries=[
            make_query(f"d{i:02d}", [m]) for i, m in enumerate(means)
        ])
        kept = select_top_k(gen_set, k)
        kept_ids = {q.doc_id for q in kept.queries}
        discarded = [q for q in gen_set.queries if q.doc_id not in kept_ids]
        if kept.queries and discarded:
            assert min(q.mean_logprob for q in kept.queries) >= max(
                q.mean_logprob for q in discarded
            )


def searchable_corpus(n=10):
    docs = [
        Document(doc_id=f"d{i:02d}", body=f"topic{i} alpha beta gamma shared words")
        for i in range(n)
    ]
    return Corpus(docs)


class TestMineNegative:
    def test_deterministic(self):
        index = build_index(searchable_corpus())
        picks = {
            mine_negative(index, "shared words", "d00", pool_size=5, seed=42, salt="d00")
            for _ in range(10)
        }
        assert len(picks) == 1
        assert "d00" not in picks

    def test_negative_from_pool(self):
        index = build_index(searchable_corpus())
        pool = [d for d, _ in search(index, "shared words", 5) if d != "d00"]
        negative = mine_negative(index, "shared words", "d00", pool_size=5, seed=1, salt="d00")
        assert negative in pool

    def test_fallback_when_pool_only_positive(self):
        index = build_index(searchable_corpus(3))
        # only d01 contains topic1, so the pool collapses after removal
        negative = mine_negative(index, "topic1", "d01", pool_size=10, seed=3, salt="d01")
        assert negative != "d01"
        assert negative in ("d00", "d02")

    def test_corpus_too_small(self):
        index = build_index(Corpus([Document(doc_id="only", body="just one doc")]))
        with pytest.raises(CorpusTooSmall):
            mine_negative(index, "anything", "only", pool_size=5, seed=0, salt="only")

    def test_salt_changes_pick(self):
        index = build_index(searchable_corpus(30))
        picks = {
            mine_negative(index, "shared words", "d00", pool_size=30, seed=42, salt=salt)
            for salt in (f"s{i}" for i in range(20))
        }
        assert len(picks) > 1


class TestBuildTriples:
    def test_counts_and_validity(self):
        corpus = searchable_corpus()
        index = build_index(corpus)
        gen_set = GenerationSet(queries=[
            make_query("d00", [-0.2], question="topic0 alpha"),
            make_query("d01", [-0.9], question="topic1 beta"),
            make_query("d02", [-0.5], question="topic2 gamma"),
        ])
        config = CurationConfig(top_k=2, negative_pool_size=5, seed=11)
        triples = build_triples(gen_set, index, config)
        assert len(triples) == 2
        assert [t.positive_doc_id for t in triples] == ["d00", "d02"]
        for triple in triples:
            assert triple.positive_doc_id != triple.negative_doc_id
            assert triple.p_q <= 0

    def test_saturation_no_filtering(self):
        corpus = searchable_corpus()
        index = build_index(corpus)
        gen_set = GenerationSet(queries=[
            make_query(f"d{i:02d}", [-0.1 * (i + 1)], question=f"topic{i} alpha")
            for i in range(5)
        ])
        triples = build_triples(gen_set, index, CurationConfig(top_k=10_000, seed=1))
        assert len(triples) == 5

    def test_negative_is_pool_member(self):
        corpus = searchable_corpus(20)
        index = build_index(corpus)
        gen_set = GenerationSet(queries=[
            make_query(f"d{i:02d}", [-0.3], question="shared words") for i in range(20)
        ])
        config = CurationConfig(top_k=20, negative_pool_size=6, seed=2)
        triples = build_triples(gen_set, index, config)
        for triple in triples:
            pool = [
                d for d, _ in search(index, triple.query, config.negative_pool_size)
                if d != triple.positive_doc_id
            ]
            assert triple.negative_doc_id in pool

    def test_stats_reported(self):
        corpus = searchable_corpus()
        index = build_index(corpus)
        gen_set = GenerationSet(queries=[make_query("d00", [-0.2], question="topic0")])
        stats = {}
        build_triples(gen_set, index, CurationConfig(top_k=1, seed=0), stats=stats)
        assert stats["n_kept"] == 1
        assert "n_fallback" in stats

    def test_default_config_matches_contract(self):
        config = CurationConfig()
        assert config.top_k == 10_000
        assert config.negative_pool_size == 1000


class TestTriplesTsv:
    def test_format_and_round_trip(self, tmp_path):
        triples = [
            TrainingTriple("what is x", "d1", "d2", -0.654321),
            TrainingTriple("who is y", "d3", "d4", -1.0),
        ]
        path = tmp_path / "triples.tsv"
        write_triples(triples, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "what is x\td1\td2\t-0.654321"
        assert lines[1] == "who is y\td3\td4\t-1.000000"
        loaded = read_triples(path)
        assert [t.query for t in loaded] == ["what is x", "who is y"]

    def test_invariant_enforced(self):
        with pytest.raises(ValueError):
            TrainingTriple("q", "same", "same", -1.0)
        with pytest.raises(ValueError):
            TrainingTriple("q", "a", "b", 0.5)


class TestNormalization:
    @pytest.mark.parametrize("raw,expected", [
        ("What is X?", "what is x"),
        ("  what   is  x ", "what is x"),
        ("what is x??", "what is x"),
        ("WHAT IS X ?", "what is x"),
        ("no question mark", "no question mark"),
    ])
    def test_normalize(self, raw, expected):
        assert normalize_question(raw) == expected


class TestOverlapReport:
    def test_basic_match(self):
        gen_set = GenerationSet(queries=[
            make_query("d1", [-0.5], question="What is X?"),
            make_query("d2", [-0.5], question="who is y"),
        ])
        stats = overlap_report(gen_set, ["what is x"])
        assert stats.generated_unique == 2
        assert stats.matched == 1
        assert stats.match_rate == pytest.approx(0.5)
        assert stats.sample_matches == ("what is x",)

    def test_empty_reference(self):
        gen_set = GenerationSet(queries=[make_query("d1", [-0.5], question="q1?")])
        stats = overlap_report(gen_set, [])
        assert stats.matched == 0
        assert stats.match_rate == 0.0

    def test_duplicate_generated_counted_once(self):
        gen_set = GenerationSet(queries=[
            make_query("d1", [-0.5], question="same question"),
            make_query("d2", [-0.5], question="Same   Question?"),
        ])
        stats = overlap_report(gen_set, ["same question"])
        assert stats.generated_unique == 1
        assert stats.matched == 1

    def test_reference_file(self, tmp_path):
        path = tmp_path / "refs.txt"
        path.write_text("what is x\n\nwho is y\n")
        assert read_reference_queries(path) == ["what is x", "who is y"]
