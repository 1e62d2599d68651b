"""Question generation against a completion backend.

One question is generated per sampled document, with per-token
log-probabilities captured so downstream filtering can rank by mean
log-probability. Backends are pluggable: a deterministic scripted mock for
tests and offline runs, or a remote completion endpoint.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import requests

from .corpus import Corpus, Document, presentation_text, sample_documents
from .errors import (
    BackendProtocolError,
    BackendUnavailable,
    EmptyGeneration,
    FailureRateExceeded,
    GbqParseFailure,
    InparsError,
    IoFailure,
    MalformedRecord,
    RateLimited,
)
from .promptkit import GBQ, PromptTemplate, render_prompt

log = logging.getLogger(__name__)

API_KEY_ENV = "INPARS_API_KEY"
DEFAULT_MAX_TOKENS = 64
MEAN_LOGPROB_TOL = 1e-12


@dataclass(frozen=True)
class CompletionRequest:
    prompt: str
    max_tokens: int = DEFAULT_MAX_TOKENS
    temperature: float = 0.0
    stop_sequences: tuple[str, ...] = ()
    want_logprobs: bool = True

    def __post_init__(self):
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")


@dataclass(frozen=True)
class Completion:
    """One backend completion; token concatenation equals text."""

    text: str
    tokens: tuple[str, ...]
    token_logprobs: tuple[float, ...]
    finish_reason: str

    def __post_init__(self):
        if len(self.tokens) != len(self.token_logprobs):
            raise ValueError("tokens and token_logprobs must align")
        if any(lp > 0 for lp in self.token_logprobs):
            raise ValueError("log-probabilities must be <= 0")
        if "".join(self.tokens) != self.text:
            raise ValueError("token concatenation must equal text")
        if self.finish_reason not in ("stop", "length"):
            raise ValueError(f"bad finish_reason: {self.finish_reason!r}")


class CompletionBackend:
    """Backend contract: complete() must honor stop sequences and the token
    cap, and populate token_logprobs when want_logprobs is set. Must be safe
    under concurrent calls up to the runner's in-flight bound."""

    def complete(self, request: CompletionRequest) -> Completion:
        raise NotImplementedError


def _naive_tokens(text: str) -> list[str]:
    """Whitespace-attached word chunks whose concatenation equals text."""
    tokens = re.findall(r"\s*\S+", text)
    consumed = sum(len(t) for t in tokens)
    if consumed < len(text):  # trailing whitespace
        if tokens:
            tokens[-1] += text[consumed:]
        else:
            tokens = [text]
    return tokens


def _truncate_at_stop(
    tokens: list[str], logprobs: list[float], stops: tuple[str, ...], max_tokens: int
) -> tuple[list[str], list[float], str | None]:
    """Walk the scripted token stream applying stop and length rules.

    Returns (tokens, logprobs, finish_reason); finish_reason is None when
    the stream ran out before either rule fired.
    """
    acc = ""
    kept: list[str] = []
    kept_lp: list[float] = []
    for token, lp in zip(tokens, logprobs):
        prev_len = len(acc)
        acc += token
        kept.append(token)
        kept_lp.append(lp)
        cut = None
        for stop in stops:
            if not stop:
                continue
            # the stop may straddle the token boundary
            search_from = max(0, prev_len - len(stop) + 1)
            idx = acc.find(stop, search_from)
            if idx != -1 and (cut is None or idx < cut):
                cut = idx
        if cut is not None:
            out_tokens: list[str] = []
            out_lp: list[float] = []
            remaining = cut
            for t, l in zip(kept, kept_lp):
                if remaining <= 0:
                    break
                out_tokens.append(t[:remaining])
                out_lp.append(l)
                remaining -= len(t)
            return out_tokens, out_lp, "stop"
        if len(kept) >= max_tokens:
            return kept, kept_lp, "length"
    return kept, kept_lp, None


class MockBackend(CompletionBackend):
    """Deterministic scripted backend.

    Script records are JSONL objects keyed by ``doc_id``, ``prompt_sha256``,
    or ``"default": true``, carrying a scripted completion (``text``,
    optional ``tokens``/``logprobs``/``finish_reason``) or a scripted
    ``error`` (``rate_limited`` / ``unavailable`` / ``protocol``, optionally
    with ``fail_times``). doc_id keys are resolved by parsing the target
    document out of the prompt, which requires the corpus.
    """

    def __init__(
        self,
        records: list[dict] | None = None,
        corpus: Corpus | None = None,
        latency_fn=None,
    ):
        self._by_doc: dict[str, dict] = {}
        self._by_hash: dict[str, dict] = {}
        self._default: dict | None = None
        self._text_to_doc: dict[str, str] = {}
        self._lock = threading.Lock()
        self._fail_counts: dict[int, int] = {}
        self.latency_fn = latency_fn
        self.request_count = 0
        if corpus is not None:
            self._text_to_doc = {
                presentation_text(doc): doc.doc_id for doc in corpus
            }
        for record in records or []:
            self._add_record(record)

    @classmethod
    def from_file(cls, path: str | Path, corpus: Corpus | None = None) -> "MockBackend":
        records = []
        try:
            with open(path, encoding="utf-8") as fh:
                for line_number, raw in enumerate(fh, start=1):
                    line = raw.strip()
                    if not line:
                        continue
                    try:
                        obj = json.loads(line)
                    except json.JSONDecodeError as exc:
                        raise MalformedRecord(line_number, f"invalid JSON ({exc.msg})") from exc
                    if not isinstance(obj, dict):
                        raise MalformedRecord(line_number, "expected a JSON object")
                    records.append(obj)
        except OSError as exc:
            raise IoFailure(f"cannot read mock script {path}: {exc}") from exc
        return cls(records=records, corpus=corpus)

    def _add_record(self, record: dict) -> None:
        if "doc_id" in record:
            self._by_doc[record["doc_id"]] = record
        elif "prompt_sha256" in record:
            self._by_hash[record["prompt_sha256"]] = record
        elif record.get("default"):
            self._default = record
        else:
            raise ValueError("mock record needs doc_id, prompt_sha256, or default")

    def _target_doc_id(self, prompt: str) -> str | None:
        # canonical prompts end with "...\nDocument: <target>\n<cue>"
        cut = prompt.rfind("\n")
        if cut == -1:
            return None
        body = prompt[:cut]
        marker = "\nDocument: "
        idx = body.rfind(marker)
        if idx == -1:
            return None
        doc_text = body[idx + len(marker):]
        return self._text_to_doc.get(doc_text)

    def _lookup(self, request: CompletionRequest) -> dict | None:
        digest = hashlib.sha256(request.prompt.encode("utf-8")).hexdigest()
        if digest in self._by_hash:
            return self._by_hash[digest]
        if self._by_doc:
            doc_id = self._target_doc_id(request.prompt)
            if doc_id is not None and doc_id in self._by_doc:
                return self._by_doc[doc_id]
        return self._default

    def _maybe_fail(self, record: dict) -> None:
        error = record.get("error")
        if not error:
            return
        fail_times = record.get("fail_times")
        if fail_times is not None:
            with self._lock:
                count = self._fail_counts.get(id(record), 0)
                if count >= fail_times:
                    return
                self._fail_counts[id(record)] = count + 1
        if error == "rate_limited":
            raise RateLimited(record.get("retry_after"))
        if error == "unavailable":
            raise BackendUnavailable("scripted outage")
        raise BackendProtocolError("scripted protocol error")

    def complete(self, request: CompletionRequest) -> Completion:
        with self._lock:
            self.request_count += 1
        if self.latency_fn is not None:
            time.sleep(self.latency_fn(request.prompt))
        record = self._lookup(request)
        if record is None:
            raise BackendProtocolError("mock script has no completion for this prompt")
        self._maybe_fail(record)
        text = record.get("text", "")
        tokens = list(record.get("tokens") or _naive_tokens(text))
        logprobs = list(record.get("logprobs") or [-1.0] * len(tokens))
        if len(tokens) != len(logprobs):
            raise BackendProtocolError("scripted tokens and logprobs do not align")
        if "".join(tokens) != text:
            raise BackendProtocolError("scripted tokens do not concatenate to text")
        kept, kept_lp, reason = _truncate_at_stop(
            tokens, logprobs, request.stop_sequences, request.max_tokens
        )
        if reason is None:
            reason = record.get("finish_reason", "stop")
        return Completion(
            text="".join(kept),
            tokens=tuple(kept),
            token_logprobs=tuple(kept_lp),
            finish_reason=reason,
        )


class RemoteBackend(CompletionBackend):
    """Completion-API client: POST {prompt, max_tokens, temperature, stop,
    logprobs} and read text/tokens/logprobs from the first choice. Bearer
    auth comes from the INPARS_API_KEY environment variable."""

    def __init__(self, endpoint: str, timeout: float = 60.0, session=None):
        self.endpoint = endpoint
        self.timeout = timeout
        self._session = session or requests.Session()

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        api_key = os.environ.get(API_KEY_ENV)
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        return headers

    def complete(self, request: CompletionRequest) -> Completion:
        body: dict = {
            "prompt": request.prompt,
            "max_tokens": request.max_tokens,
            "temperature": request.temperature,
            "stop": list(request.stop_sequences),
        }
        if request.want_logprobs:
            body["logprobs"] = 0
        try:
            response = self._session.post(
                self.endpoint, json=body, headers=self._headers(), timeout=self.timeout
            )
        except requests.RequestException as exc:
            raise BackendUnavailable(str(exc)) from exc
        if response.status_code == 429:
            retry_after = response.headers.get("Retry-After")
            raise RateLimited(float(retry_after) if retry_after else None)
        if response.status_code >= 500:
            raise BackendUnavailable(f"HTTP {response.status_code}")
        if response.status_code != 200:
            raise BackendProtocolError(f"HTTP {response.status_code}: {response.text[:200]}")
        try:
            payload = response.json()
        except ValueError as exc:
            raise BackendProtocolError("response body is not JSON") from exc
        return self._parse_choice(payload, request)

    @staticmethod
    def _parse_choice(payload: dict, request: CompletionRequest) -> Completion:
        try:
            choice = payload["choices"][0]
            text = choice["text"]
            finish_reason = choice["finish_reason"]
        except (KeyError, IndexError, TypeError) as exc:
            raise BackendProtocolError(f"malformed completion response: {exc}") from exc
        if finish_reason not in ("stop", "length"):
            raise BackendProtocolError(f"unexpected finish_reason: {finish_reason!r}")
        tokens: list[str] = []
        logprobs: list[float] = []
        if request.want_logprobs:
            lp_block = choice.get("logprobs")
            if not isinstance(lp_block, dict):
                raise BackendProtocolError("response lacks logprobs block")
            tokens = lp_block.get("tokens")
            logprobs = lp_block.get("token_logprobs")
            if not isinstance(tokens, list) or not isinstance(logprobs, list):
                raise BackendProtocolError("logprobs block lacks token lists")
            if any(not isinstance(lp, (int, float)) for lp in logprobs):
                raise BackendProtocolError("token_logprobs contains non-numeric entries")
        else:
            tokens = _naive_tokens(text)
            logprobs = [0.0] * len(tokens)
        try:
            return Completion(
                text=text,
                tokens=tuple(tokens),
                token_logprobs=tuple(float(lp) for lp in logprobs),
                finish_reason=finish_reason,
            )
        except ValueError as exc:
            raise BackendProtocolError(f"inconsistent completion payload: {exc}") from exc


@dataclass(frozen=True)
class GeneratedQuery:
    """A generated question plus the log-probabilities of its tokens."""

    doc_id: str
    question: str
    token_logprobs: tuple[float, ...]
    mean_logprob: float
    mode: str
    discarded_bad_question: str | None = None

    def __post_init__(self):
        if not self.question:
            raise ValueError("question must be non-empty")
        if not self.token_logprobs:
            raise ValueError("token_logprobs must be non-empty")
        expected = sum(self.token_logprobs) / len(self.token_logprobs)
        if abs(self.mean_logprob - expected) > MEAN_LOGPROB_TOL:
            raise ValueError("mean_logprob does not match token_logprobs")

    def to_record(self) -> dict:
        return {
            "doc_id": self.doc_id,
            "question": self.question,
            "token_logprobs": list(self.token_logprobs),
            "mean_logprob": self.mean_logprob,
            "mode": self.mode,
            "discarded_bad_question": self.discarded_bad_question,
        }

    @classmethod
    def from_record(cls, record: dict) -> "GeneratedQuery":
        return cls(
            doc_id=record["doc_id"],
            question=record["question"],
            token_logprobs=tuple(record["token_logprobs"]),
            mean_logprob=record["mean_logprob"],
            mode=record["mode"],
            discarded_bad_question=record.get("discarded_bad_question"),
        )


@dataclass(frozen=True)
class GenerationFailure:
    doc_id: str
    reason: str


@dataclass
class GenerationSet:
    """Generated queries in ascending doc_id order, plus the failure log."""

    queries: list[GeneratedQuery]
    failures: list[GenerationFailure] = field(default_factory=list)
    n_requested: int = 0

    @property
    def n_succeeded(self) -> int:
        return len(self.queries)

    @property
    def n_failed(self) -> int:
        return len(self.failures)

    def save(self, path: str | Path) -> None:
        try:
            with open(path, "w", encoding="utf-8") as fh:
                for query in self.queries:
                    fh.write(json.dumps(query.to_record(), sort_keys=True,
                                        ensure_ascii=False) + "\n")
        except OSError as exc:
            raise IoFailure(f"cannot write generation set {path}: {exc}") from exc

    @classmethod
    def load(cls, path: str | Path) -> "GenerationSet":
        queries = []
        try:
            with open(path, encoding="utf-8") as fh:
                for line_number, raw in enumerate(fh, start=1):
                    line = raw.strip()
                    if not line:
                        continue
                    try:
                        queries.append(GeneratedQuery.from_record(json.loads(line)))
                    except (json.JSONDecodeError, KeyError, ValueError) as exc:
                        raise MalformedRecord(line_number, str(exc)) from exc
        except OSError as exc:
            raise IoFailure(f"cannot read generation set {path}: {exc}") from exc
        return cls(queries=queries, n_requested=len(queries))


def _span_logprobs(completion: Completion, start: int, end: int) -> tuple[float, ...]:
    """Log-probabilities of tokens overlapping [start, end) in the text."""
    kept: list[float] = []
    pos = 0
    for token, lp in zip(completion.tokens, completion.token_logprobs):
        token_start, token_end = pos, pos + len(token)
        pos = token_end
        if token_start < end and token_end > start:
            kept.append(lp)
    return tuple(kept)


def _find_trimmed_span(text: str, segment_start: int, segment_end: int) -> tuple[int, int, str]:
    segment = text[segment_start:segment_end]
    trimmed = segment.strip()
    if not trimmed:
        return segment_start, segment_start, ""
    start = segment_start + len(segment) - len(segment.lstrip())
    return start, start + len(trimmed), trimmed


def _parse_gbq(completion: Completion, good_cue: str) -> tuple[str, int, int, str]:
    """Locate the bad question and the kept good question in a GBQ completion.

    Returns (bad_question, good_start, good_end, good_question); the span
    indexes into completion.text.
    """
    text = completion.text
    newline = text.find("\n")
    if newline == -1:
        raise GbqParseFailure("completion has no line break after the bad question")
    bad_question = text[:newline].strip()
    offset = newline + 1
    for line in text[offset:].split("\n"):
        stripped = line.lstrip()
        if stripped.startswith(good_cue):
            cue_at = offset + (len(line) - len(stripped))
            q_start, q_end, question = _find_trimmed_span(
                text, cue_at + len(good_cue), offset + len(line)
            )
            return bad_question, q_start, q_end, question
        offset += len(line) + 1
    raise GbqParseFailure("no good-question line in completion")


def generate_for_document(
    backend: CompletionBackend,
    template: PromptTemplate,
    doc: Document,
    max_tokens: int = DEFAULT_MAX_TOKENS,
    temperature: float = 0.0,
) -> GeneratedQuery:
    """Generate one question for one document.

    Vanilla prompts stop at the first newline and keep the whole completion
    as the question. GBQ prompts read the first line as the bad question and
    the following good-question line as the kept question; only the kept
    question's tokens enter token_logprobs.
    """
    doc_text = presentation_text(doc)
    if not doc_text:
        raise ValueError("document has no presentation text")
    prompt = render_prompt(template, doc_text)
    stop = ("\n\n",) if template.mode == GBQ else ("\n",)
    completion = backend.complete(
        CompletionRequest(
            prompt=prompt,
            max_tokens=max_tokens,
            temperature=temperature,
            stop_sequences=stop,
            want_logprobs=True,
        )
    )
    bad_question = None
    if template.mode == GBQ:
        bad_question, q_start, q_end, question = _parse_gbq(completion, template.good_cue)
    else:
        q_start, q_end, question = _find_trimmed_span(
            completion.text, 0, len(completion.text)
        )
    if not question:
        raise EmptyGeneration(f"empty question for doc {doc.doc_id!r}")
    logprobs = _span_logprobs(completion, q_start, q_end)
    return GeneratedQuery(
        doc_id=doc.doc_id,
        question=question,
        token_logprobs=logprobs,
        mean_logprob=sum(logprobs) / len(logprobs),
        mode=template.mode,
        discarded_bad_question=bad_question,
    )


@dataclass(frozen=True)
class RetryPolicy:
    """Bounded retries with exponential backoff on transient backend errors."""

    retries: int = 3
    base_delay: float = 0.5
    max_delay: float = 8.0

    def delay(self, attempt: int, retry_after: float | None = None) -> float:
        if retry_after is not None:
            return min(retry_after, self.max_delay)
        return min(self.base_delay * (2 ** attempt), self.max_delay)


def _generate_with_retry(backend, template, doc, max_tokens, temperature, retry):
    attempt = 0
    while True:
        try:
            return generate_for_document(
                backend, template, doc, max_tokens=max_tokens, temperature=temperature
            )
        except (RateLimited, BackendUnavailable) as exc:
            if attempt >= retry.retries:
                raise
            retry_after = exc.retry_after if isinstance(exc, RateLimited) else None
            time.sleep(retry.delay(attempt, retry_after))
            attempt += 1


def run_generation(
    corpus: Corpus,
    backend: CompletionBackend,
    template: PromptTemplate,
    n: int = 100_000,
    min_chars: int = 300,
    seed: int = 0,
    max_tokens: int = DEFAULT_MAX_TOKENS,
    temperature: float = 0.0,
    in_flight: int = 8,
    failure_ceiling: float = 0.2,
    retry: RetryPolicy = RetryPolicy(),
) -> GenerationSet:
    """Sample n documents and generate one question per document.

    Per-document failures are logged and skipped; the whole run aborts when
    the failure rate exceeds failure_ceiling. Output order is ascending
    doc_id regardless of completion order.
    """
    doc_ids = sample_documents(corpus, n, min_chars=min_chars, seed=seed)
    queries: list[GeneratedQuery] = []
    failures: list[GenerationFailure] = []

    def work(doc_id: str):
        doc = corpus.get(doc_id)
        return _generate_with_retry(backend, template, doc, max_tokens, temperature, retry)

    with ThreadPoolExecutor(max_workers=max(1, in_flight)) as pool:
        futures = {doc_id: pool.submit(work, doc_id) for doc_id in doc_ids}
        for doc_id, future in futures.items():
            try:
                queries.append(future.result())
            except InparsError as exc:
                log.warning("generation failed for %s: %s", doc_id, exc)
                failures.append(GenerationFailure(doc_id, f"{type(exc).__name__}: {exc}"))

    if len(doc_ids) and len(failures) / len(doc_ids) > failure_ceiling:
        raise FailureRateExceeded(len(failures), len(doc_ids), failure_ceiling)
    queries.sort(key=lambda q: q.doc_id)
    failures.sort(key=lambda f: f.doc_id)
    return GenerationSet(queries=queries, failures=failures, n_requested=len(doc_ids))
