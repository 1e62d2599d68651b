"""Few-shot prompt rendering for the vanilla and GBQ question templates.

Rendering is byte-deterministic: same template and target document always
produce the same prompt string. Cue strings are overridable but default to
the canonical wording used throughout the toolkit.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import IoFailure, MalformedRecord, MissingField

VANILLA = "vanilla"
GBQ = "gbq"
PROMPT_MODES = (VANILLA, GBQ)

DOCUMENT_CUE = "Document:"
QUERY_CUE = "Relevant Query:"
BAD_CUE = "Bad Question:"
GOOD_CUE = "Good Question:"


@dataclass(frozen=True)
class FewShotExample:
    document_text: str
    good_question: str
    bad_question: str | None = None

    def __post_init__(self):
        if not self.document_text:
            raise ValueError("document_text must be non-empty")
        if not self.good_question:
            raise ValueError("good_question must be non-empty")


@dataclass(frozen=True)
class PromptTemplate:
    """N few-shot examples plus an optional header, rendered in one mode."""

    mode: str
    examples: tuple[FewShotExample, ...]
    header: str | None = None
    document_cue: str = DOCUMENT_CUE
    query_cue: str = QUERY_CUE
    bad_cue: str = BAD_CUE
    good_cue: str = GOOD_CUE

    def __post_init__(self):
        if self.mode not in PROMPT_MODES:
            raise ValueError(f"unknown prompt mode: {self.mode!r}")
        if len(self.examples) < 1:
            raise ValueError("a prompt template needs at least one example")
        if self.mode == GBQ:
            for i, example in enumerate(self.examples, start=1):
                if not example.bad_question:
                    raise ValueError(f"gbq example {i} is missing bad_question")

    @property
    def generation_cue(self) -> str:
        return self.bad_cue if self.mode == GBQ else self.query_cue


def load_examples(path: str | Path) -> list[FewShotExample]:
    """Parse the JSONL example format, preserving file order.

    Records carry `document_text`, `good_question`, and optionally
    `bad_question`.
    """
    examples: list[FewShotExample] = []
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
                for name in ("document_text", "good_question"):
                    if not isinstance(obj.get(name), str) or not obj[name]:
                        raise MissingField(name, line_number)
                bad = obj.get("bad_question")
                if bad is not None and not isinstance(bad, str):
                    raise MalformedRecord(line_number, "'bad_question' must be a string")
                examples.append(
                    FewShotExample(
                        document_text=obj["document_text"],
                        good_question=obj["good_question"],
                        bad_question=bad,
                    )
                )
    except OSError as exc:
        raise IoFailure(f"cannot read examples {path}: {exc}") from exc
    return examples


def render_prompt(template: PromptTemplate, doc_text: str) -> str:
    """Render the few-shot prompt for one target document.

    Vanilla blocks read "Document / Relevant Query"; GBQ blocks read
    "Document / Bad Question / Good Question". The target document comes
    last and the prompt ends with the generation cue.
    """
    if not doc_text:
        raise ValueError("doc_text must be non-empty")
    parts: list[str] = []
    if template.header:
        parts.append(template.header + "\n\n")
    for i, example in enumerate(template.examples, start=1):
        parts.append(f"Example {i}:\n")
        parts.append(f"{template.document_cue} {example.document_text}\n")
        if template.mode == GBQ:
            parts.append(f"{template.bad_cue} {example.bad_question}\n")
            parts.append(f"{template.good_cue} {example.good_question}\n\n")
        else:
            parts.append(f"{template.query_cue} {example.good_question}\n\n")
    parts.append(f"Example {len(template.examples) + 1}:\n")
    parts.append(f"{template.document_cue} {doc_text}\n")
    parts.append(template.generation_cue)
    return "".join(parts)
