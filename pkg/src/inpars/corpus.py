"""Document collections: ingestion, addressable storage, and candidate sampling.

Corpora are read from JSONL (BEIR convention: ``_id``, optional ``title``,
``text``) or from two-column TSV. A corpus is immutable after ingest and
iterates in ingestion order.
"""
from __future__ import annotations

import json
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

from .errors import (
    DuplicateDocId,
    InsufficientEligibleDocuments,
    IoFailure,
    MalformedRecord,
)

CORPUS_FORMATS = ("jsonl", "tsv")


@dataclass(frozen=True)
class Document:
    """One corpus item. `title` is None when the collection has no titles;
    an empty title is treated the same as a missing one."""

    doc_id: str
    body: str
    title: str | None = None

    def __post_init__(self):
        if not self.doc_id:
            raise ValueError("doc_id must be non-empty")
        if not self.body and not self.title:
            raise ValueError(f"document {self.doc_id!r} has neither title nor body")


def presentation_text(doc: Document) -> str:
    """Text a document is presented as: title prepended to the body when a
    non-empty title exists, otherwise the body unchanged."""
    if doc.title:
        return f"{doc.title} {doc.body}"
    return doc.body


class Corpus:
    """Immutable, ordered document collection with random access by doc_id."""

    def __init__(self, documents: list[Document]):
        self._docs: dict[str, Document] = {}
        for doc in documents:
            if doc.doc_id in self._docs:
                raise DuplicateDocId(doc.doc_id)
            self._docs[doc.doc_id] = doc

    @property
    def doc_count(self) -> int:
        return len(self._docs)

    @property
    def doc_ids(self) -> list[str]:
        return list(self._docs.keys())

    def get(self, doc_id: str) -> Document:
        return self._docs[doc_id]

    def __contains__(self, doc_id: str) -> bool:
        return doc_id in self._docs

    def __iter__(self) -> Iterator[Document]:
        return iter(self._docs.values())

    def __len__(self) -> int:
        return len(self._docs)


def _parse_jsonl_record(line: str, line_number: int) -> Document:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise MalformedRecord(line_number, f"invalid JSON ({exc.msg})") from exc
    if not isinstance(obj, dict):
        raise MalformedRecord(line_number, "expected a JSON object")
    doc_id = obj.get("_id")
    if not isinstance(doc_id, str) or not doc_id:
        raise MalformedRecord(line_number, "missing or empty '_id'")
    text = obj.get("text")
    if not isinstance(text, str):
        raise MalformedRecord(line_number, "missing 'text'")
    title = obj.get("title")
    if title is not None and not isinstance(title, str):
        raise MalformedRecord(line_number, "'title' must be a string")
    try:
        return Document(doc_id=doc_id, body=text, title=title)
    except ValueError as exc:
        raise MalformedRecord(line_number, str(exc)) from exc


def _parse_tsv_record(line: str, line_number: int) -> Document:
    parts = line.split("\t", 1)
    if len(parts) != 2:
        raise MalformedRecord(line_number, "expected 'doc_id<TAB>text'")
    doc_id, text = parts
    if not doc_id:
        raise MalformedRecord(line_number, "empty doc_id")
    try:
        return Document(doc_id=doc_id, body=text)
    except ValueError as exc:
        raise MalformedRecord(line_number, str(exc)) from exc


def ingest(path: str | Path, format: str = "jsonl") -> Corpus:
    """Read a corpus file into a Corpus, preserving record order.

    Raises MalformedRecord / DuplicateDocId on bad input, IoFailure when the
    file cannot be read.
    """
    if format not in CORPUS_FORMATS:
        raise ValueError(f"unsupported corpus format: {format!r}")
    parse = _parse_jsonl_record if format == "jsonl" else _parse_tsv_record
    documents: list[Document] = []
    seen: set[str] = set()
    try:
        with open(path, encoding="utf-8") as fh:
            for line_number, raw in enumerate(fh, start=1):
                line = raw.rstrip("\n").rstrip("\r")
                if not line:
                    continue
                doc = parse(line, line_number)
                if doc.doc_id in seen:
                    raise DuplicateDocId(doc.doc_id)
                seen.add(doc.doc_id)
                documents.append(doc)
    except OSError as exc:
        raise IoFailure(f"cannot read corpus {path}: {exc}") from exc
    return Corpus(documents)


def export_jsonl(corpus: Corpus, path: str | Path) -> None:
    """Write the canonical JSONL form; ingest(export(c)) round-trips losslessly."""
    try:
        with open(path, "w", encoding="utf-8") as fh:
            for doc in corpus:
                obj: dict = {"_id": doc.doc_id}
                if doc.title is not None:
                    obj["title"] = doc.title
                obj["text"] = doc.body
                fh.write(json.dumps(obj, ensure_ascii=False) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write corpus {path}: {exc}") from exc


def sample_documents(
    corpus: Corpus, n: int, min_chars: int = 300, seed: int = 0
) -> list[str]:
    """Sample n distinct doc_ids whose presentation text is at least
    min_chars characters long.

    Sampling is without replacement from the eligible pool, which is
    equivalent to rejection sampling with resampling of short documents.
    Identical (corpus, n, min_chars, seed) yields an identical list.
    """
    if n <= 0:
        raise ValueError("n must be positive")
    eligible = [
        doc.doc_id for doc in corpus if len(presentation_text(doc)) >= min_chars
    ]
    if len(eligible) < n:
        raise InsufficientEligibleDocuments(len(eligible), n)
    rng = random.Random(seed)
    return rng.sample(eligible, n)
