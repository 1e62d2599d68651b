#!/usr/bin/env python3
"""Regenerate the shipped demo dataset under data/demo/.

Everything is seeded, so re-running this script reproduces the exact same
files. The demo corpus pairs each document with a distinctive topic phrase
so BM25 retrieval and the mock generation script have signal to work with.
"""
import json
import random
import re
from pathlib import Path

DEMO_DIR = Path(__file__).resolve().parent.parent / "data" / "demo"
SEED = 20240
N_DOCS = 200
N_QUERIES = 30

ADJECTIVES = [
    "amber", "basalt", "cedar", "cobalt", "crimson", "dusty", "emerald",
    "frosted", "gilded", "granite", "hollow", "ivory", "jade", "maple",
    "midnight", "obsidian", "quartz", "russet", "silver", "willow",
]
NOUNS = [
    "anchor", "beacon", "bridge", "canal", "compass", "ferry", "harbor",
    "lantern", "meadow", "mill", "orchard", "quarry", "reservoir", "ridge",
    "saddle", "signal", "terrace", "tunnel", "viaduct", "windlass",
]
FILLER_SENTENCES = [
    "Inspection crews logged their findings in the quarterly ledger.",
    "Local records mention routine maintenance every other season.",
    "The surrounding district reported steady traffic through the year.",
    "Weather conditions were described as typical for the region.",
    "Funding for repairs was approved after a short public review.",
    "Surveyors noted minor wear along the northern approach.",
    "Residents raised no objections during the planning meeting.",
    "The council archived the report alongside earlier assessments.",
    "Materials were sourced from suppliers within the county.",
    "A follow-up visit was scheduled for the coming spring.",
]


def naive_tokens(text):
    tokens = re.findall(r"\s*\S+", text)
    consumed = sum(len(t) for t in tokens)
    if consumed < len(text) and tokens:
        tokens[-1] += text[consumed:]
    return tokens


def build_docs(rng):
    topics = [(a, n) for a in ADJECTIVES for n in NOUNS]
    rng.shuffle(topics)
    docs = []
    for i in range(N_DOCS):
        adj, noun = topics[i]
        doc_id = f"D{i:04d}"
        title = f"{adj.capitalize()} {noun.capitalize()} Survey"
        body_sentences = [
            f"The {adj} {noun} was assessed by the county engineers this term.",
            f"Access to the {adj} {noun} remains open from the service road.",
        ]
        fillers = rng.sample(FILLER_SENTENCES, 6)
        for filler in fillers:
            body_sentences.append(filler)
        body_sentences.append(
            f"Overall the {adj} {noun} was judged to be in fair working order."
        )
        rng.shuffle(body_sentences)
        docs.append({"_id": doc_id, "title": title, "text": " ".join(body_sentences),
                     "topic": (adj, noun)})
    return docs


def write_corpus(docs):
    with open(DEMO_DIR / "corpus.jsonl", "w", encoding="utf-8") as fh:
        for doc in docs:
            record = {"_id": doc["_id"], "title": doc["title"], "text": doc["text"]}
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")


def write_queries_and_qrels(rng, docs):
    picks = rng.sample(range(N_DOCS), N_QUERIES)
    with open(DEMO_DIR / "queries.tsv", "w", encoding="utf-8") as qf, \
         open(DEMO_DIR / "qrels.txt", "w", encoding="utf-8") as rf:
        for q_index, doc_index in enumerate(picks, start=1):
            adj, noun = docs[doc_index]["topic"]
            query_id = f"q{q_index:03d}"
            qf.write(f"{query_id}\t{adj} {noun} condition report\n")
            rf.write(f"{query_id} 0 {docs[doc_index]['_id']} 2\n")
            # same-noun documents are marginally relevant
            partials = [
                d["_id"] for d in docs
                if d["topic"][1] == noun and d["_id"] != docs[doc_index]["_id"]
            ]
            for partial in sorted(partials)[:2]:
                rf.write(f"{query_id} 0 {partial} 1\n")


def write_mock_script(rng, docs):
    with open(DEMO_DIR / "mock_script.jsonl", "w", encoding="utf-8") as fh:
        for i, doc in enumerate(docs):
            adj, noun = doc["topic"]
            question = f"what condition is the {adj} {noun} in?"
            text = f" {question}\n"
            tokens = naive_tokens(text)
            # half the docs get confident generations, half diffuse ones
            center = -0.3 if i % 2 == 0 else -1.8
            logprobs = [round(center + rng.uniform(-0.1, 0.1), 4) for _ in tokens]
            fh.write(json.dumps({
                "doc_id": doc["_id"],
                "text": text,
                "tokens": tokens,
                "logprobs": logprobs,
                "finish_reason": "stop",
            }, ensure_ascii=False) + "\n")


CONFIG = """\
# Demo pipeline: 200-document corpus with a scripted mock backend.
[corpus]
path = "corpus.jsonl"
format = "jsonl"

[index]
k1 = 0.9
b = 0.4

[prompt]
mode = "vanilla"
examples_path = "../examples_vanilla.jsonl"

[backend]
kind = "mock"
script_path = "mock_script.jsonl"

[generation]
n = 120
min_chars = 300
max_tokens = 64
temperature = 0.0
seed = 4242
in_flight = 8
failure_ceiling = 0.2

[curation]
top_k = 60
negative_pool_size = 50
seed = 777

[retrieval]
candidates_k = 100

[rerank]
scorer = "lexical"
window = 10
stride = 5

[eval]
queries_path = "queries.tsv"
qrels_path = "qrels.txt"
metrics = ["mrr@10", "map", "ndcg@10", "ndcg@20", "recall@100"]
rel_threshold = 1

[output]
dir = "out"
"""


def main():
    DEMO_DIR.mkdir(parents=True, exist_ok=True)
    rng = random.Random(SEED)
    docs = build_docs(rng)
    write_corpus(docs)
    write_queries_and_qrels(rng, docs)
    write_mock_script(rng, docs)
    (DEMO_DIR / "config.toml").write_text(CONFIG, encoding="utf-8")
    lengths = [len(d["title"]) + 1 + len(d["text"]) for d in docs]
    print(f"wrote {N_DOCS} docs (presentation length {min(lengths)}-{max(lengths)}), "
          f"{N_QUERIES} queries to {DEMO_DIR}")


if __name__ == "__main__":
    main()
