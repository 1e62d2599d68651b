"""Pipeline orchestration: index, generate, curate, retrieve, rerank,
evaluate, driven by one TOML config file.

Every stage writes its artifact atomically and appends a summary record to
summary.jsonl in the output directory. Re-running a stage whose config hash
and input fingerprints are unchanged is a no-op unless forced. One pipeline
process per output directory, enforced by a lock file.
"""
from __future__ import annotations

import contextlib
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import curation, generator, lexindex, promptkit, rerankeval
from .corpus import Corpus, ingest
from .errors import ConfigInvalid, MissingUpstreamArtifact, OutputDirLocked
from .generator import GenerationSet, MockBackend, RemoteBackend
from .promptkit import PROMPT_MODES

log = logging.getLogger(__name__)

STAGES = ("index", "generate", "curate", "retrieve", "rerank", "evaluate")

ARTIFACTS = {
    "index": "index.json",
    "generate": "generated.jsonl",
    "curate": "triples.tsv",
    "retrieve": "run.bm25.txt",
    "rerank": "run.reranked.txt",
    "evaluate": "metrics.json",
}

SUMMARY_FILE = "summary.jsonl"
LOCK_FILE = ".lock"
STAMP_DIR = ".stamps"


@dataclass(frozen=True)
class CorpusSection:
    path: str
    format: str = "jsonl"


@dataclass(frozen=True)
class IndexSection:
    k1: float = lexindex.DEFAULT_K1
    b: float = lexindex.DEFAULT_B


@dataclass(frozen=True)
class PromptSection:
    mode: str = promptkit.VANILLA
    examples_path: str | None = None
    header: str | None = None


@dataclass(frozen=True)
class BackendSection:
    kind: str = "mock"
    endpoint: str | None = None
    script_path: str | None = None


@dataclass(frozen=True)
class GenerationSection:
    n: int = 100_000
    min_chars: int = 300
    max_tokens: int = 64
    temperature: float = 0.0
    seed: int | None = None
    in_flight: int = 8
    failure_ceiling: float = 0.2


@dataclass(frozen=True)
class CurationSection:
    top_k: int = curation.DEFAULT_TOP_K
    negative_pool_size: int = curation.DEFAULT_NEGATIVE_POOL
    seed: int | None = None


@dataclass(frozen=True)
class RetrievalSection:
    candidates_k: int = 1000


@dataclass(frozen=True)
class RerankSection:
    scorer: str = "lexical"
    window: int = rerankeval.DEFAULT_WINDOW
    stride: int = rerankeval.DEFAULT_STRIDE
    endpoint: str | None = None


@dataclass(frozen=True)
class EvalSection:
    queries_path: str | None = None
    qrels_path: str | None = None
    metrics: tuple[str, ...] = ("mrr@10", "map", "ndcg@10", "ndcg@20")
    rel_threshold: int = 1


@dataclass(frozen=True)
class PipelineConfig:
    corpus: CorpusSection
    index: IndexSection = IndexSection()
    prompt: PromptSection = PromptSection()
    backend: BackendSection = BackendSection()
    generation: GenerationSection = GenerationSection()
    curation: CurationSection = CurationSection()
    retrieval: RetrievalSection = RetrievalSection()
    rerank: RerankSection = RerankSection()
    eval: EvalSection = EvalSection()
    output_dir: str = "out"
    base_dir: Path = field(default_factory=Path.cwd, compare=False)

    def resolve(self, path: str) -> Path:
        candidate = Path(path)
        if candidate.is_absolute():
            return candidate
        return (self.base_dir / candidate).resolve()

    @property
    def resolved_output_dir(self) -> Path:
        return self.resolve(self.output_dir)

    def with_seed(self, seed: int) -> "PipelineConfig":
        return replace(
            self,
            generation=replace(self.generation, seed=seed),
            curation=replace(self.curation, seed=seed),
        )

    def with_output_dir(self, output_dir: str) -> "PipelineConfig":
        return replace(self, output_dir=output_dir)

    def semantic_dict(self) -> dict:
        """Every field that affects artifact content; output_dir and the
        config file's location are excluded."""
        return {
            "corpus": {"path": self.corpus.path, "format": self.corpus.format},
            "index": {"k1": self.index.k1, "b": self.index.b},
            "prompt": {
                "mode": self.prompt.mode,
                "examples_path": self.prompt.examples_path,
                "header": self.prompt.header,
            },
            "backend": {
                "kind": self.backend.kind,
                "endpoint": self.backend.endpoint,
                "script_path": self.backend.script_path,
            },
            "generation": {
                "n": self.generation.n,
                "min_chars": self.generation.min_chars,
                "max_tokens": self.generation.max_tokens,
                "temperature": self.generation.temperature,
                "seed": self.generation.seed,
                "in_flight": self.generation.in_flight,
                "failure_ceiling": self.generation.failure_ceiling,
            },
            "curation": {
                "top_k": self.curation.top_k,
                "negative_pool_size": self.curation.negative_pool_size,
                "seed": self.curation.seed,
            },
            "retrieval": {"candidates_k": self.retrieval.candidates_k},
            "rerank": {
                "scorer": self.rerank.scorer,
                "window": self.rerank.window,
                "stride": self.rerank.stride,
                "endpoint": self.rerank.endpoint,
            },
            "eval": {
                "queries_path": self.eval.queries_path,
                "qrels_path": self.eval.qrels_path,
                "metrics": list(self.eval.metrics),
                "rel_threshold": self.eval.rel_threshold,
            },
        }

    def config_hash(self) -> str:
        canonical = json.dumps(self.semantic_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


_SECTION_TYPES = {
    "corpus": CorpusSection,
    "index": IndexSection,
    "prompt": PromptSection,
    "backend": BackendSection,
    "generation": GenerationSection,
    "curation": CurationSection,
    "retrieval": RetrievalSection,
    "rerank": RerankSection,
    "eval": EvalSection,
}

_FIELD_TYPES = {
    ("corpus", "path"): str,
    ("corpus", "format"): str,
    ("index", "k1"): float,
    ("index", "b"): float,
    ("prompt", "mode"): str,
    ("prompt", "examples_path"): str,
    ("prompt", "header"): str,
    ("backend", "kind"): str,
    ("backend", "endpoint"): str,
    ("backend", "script_path"): str,
    ("generation", "n"): int,
    ("generation", "min_chars"): int,
    ("generation", "max_tokens"): int,
    ("generation", "temperature"): float,
    ("generation", "seed"): int,
    ("generation", "in_flight"): int,
    ("generation", "failure_ceiling"): float,
    ("curation", "top_k"): int,
    ("curation", "negative_pool_size"): int,
    ("curation", "seed"): int,
    ("retrieval", "candidates_k"): int,
    ("rerank", "scorer"): str,
    ("rerank", "window"): int,
    ("rerank", "stride"): int,
    ("rerank", "endpoint"): str,
    ("eval", "queries_path"): str,
    ("eval", "qrels_path"): str,
    ("eval", "metrics"): list,
    ("eval", "rel_threshold"): int,
    ("output", "dir"): str,
}


def _coerce(section: str, key: str, value):
    expected = _FIELD_TYPES[(section, key)]
    if expected is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if expected is int and (isinstance(value, bool) or not isinstance(value, int)):
        raise ConfigInvalid(f"{section}.{key}", f"expected an integer, got {value!r}")
    if not isinstance(value, expected):
        raise ConfigInvalid(
            f"{section}.{key}", f"expected {expected.__name__}, got {type(value).__name__}"
        )
    if expected is list:
        if not all(isinstance(item, str) for item in value):
            raise ConfigInvalid(f"{section}.{key}", "expected a list of strings")
        return tuple(value)
    return value


def load_config(path: str | Path) -> PipelineConfig:
    """Parse and validate a TOML pipeline config. Unknown sections or keys
    are a hard error; relative paths resolve against the config file's
    directory."""
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except OSError as exc:
        raise ConfigInvalid("(file)", f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigInvalid("(file)", f"invalid TOML: {exc}") from exc

    sections: dict[str, dict] = {}
    for section_name, body in raw.items():
        if section_name == "output":
            if not isinstance(body, dict):
                raise ConfigInvalid("output", "expected a table")
            for key in body:
                if key != "dir":
                    raise ConfigInvalid(f"output.{key}", "unknown key")
            sections["output"] = {"dir": _coerce("output", "dir", body["dir"])} if "dir" in body else {}
            continue
        if section_name not in _SECTION_TYPES:
            raise ConfigInvalid(section_name, "unknown section")
        if not isinstance(body, dict):
            raise ConfigInvalid(section_name, "expected a table")
        section_type = _SECTION_TYPES[section_name]
        valid_keys = set(section_type.__dataclass_fields__)
        parsed = {}
        for key, value in body.items():
            if key not in valid_keys:
                raise ConfigInvalid(f"{section_name}.{key}", "unknown key")
            parsed[key] = _coerce(section_name, key, value)
        sections[section_name] = parsed

    if "corpus" not in sections or "path" not in sections["corpus"]:
        raise ConfigInvalid("corpus.path", "required")

    kwargs = {}
    for name, section_type in _SECTION_TYPES.items():
        kwargs[name] = section_type(**sections.get(name, {}))
    output_dir = sections.get("output", {}).get("dir", "out")
    config = PipelineConfig(
        base_dir=path.parent.resolve(), output_dir=output_dir, **kwargs
    )
    _validate_config(config)
    return config


def _validate_config(config: PipelineConfig) -> None:
    if config.corpus.format not in ("jsonl", "tsv"):
        raise ConfigInvalid("corpus.format", f"must be jsonl or tsv, got {config.corpus.format!r}")
    if config.prompt.mode not in PROMPT_MODES:
        raise ConfigInvalid("prompt.mode", f"must be one of {PROMPT_MODES}")
    if config.backend.kind not in ("mock", "remote"):
        raise ConfigInvalid("backend.kind", "must be mock or remote")
    if config.rerank.scorer not in rerankeval.SCORER_KINDS:
        raise ConfigInvalid("rerank.scorer", f"must be one of {rerankeval.SCORER_KINDS}")
    if config.generation.n < 1:
        raise ConfigInvalid("generation.n", "must be >= 1")
    if config.generation.max_tokens < 1:
        raise ConfigInvalid("generation.max_tokens", "must be >= 1")
    if config.generation.temperature < 0:
        raise ConfigInvalid("generation.temperature", "must be >= 0")
    if not 0 <= config.generation.failure_ceiling <= 1:
        raise ConfigInvalid("generation.failure_ceiling", "must be in [0, 1]")
    if config.curation.top_k < 1:
        raise ConfigInvalid("curation.top_k", "must be >= 1")
    if config.curation.negative_pool_size < 2:
        raise ConfigInvalid("curation.negative_pool_size", "must be >= 2")
    if config.retrieval.candidates_k < 1:
        raise ConfigInvalid("retrieval.candidates_k", "must be >= 1")
    if config.rerank.window < 1 or not 1 <= config.rerank.stride <= config.rerank.window:
        raise ConfigInvalid("rerank.stride", "need window >= 1 and 1 <= stride <= window")
    for metric in config.eval.metrics:
        rerankeval.parse_metric(metric)


@contextlib.contextmanager
def output_lock(output_dir: Path):
    """One pipeline process per output directory."""
    output_dir.mkdir(parents=True, exist_ok=True)
    lock_path = output_dir / LOCK_FILE
    try:
        fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise OutputDirLocked(
            f"{output_dir} is locked by another pipeline process "
            f"(remove {lock_path} if that process is gone)"
        ) from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(lock_path)


def _atomic_write(path: Path, writer) -> None:
    tmp = path.with_name(path.name + f".tmp.{os.getpid()}")
    try:
        writer(tmp)
        os.replace(tmp, path)
    finally:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)


def _file_sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


class _StageRunner:
    """Shared state for one pipeline invocation: resolved paths, lazily
    ingested corpus, and stamp bookkeeping."""

    def __init__(self, config: PipelineConfig, force: bool = False):
        self.config = config
        self.force = force
        self.out = config.resolved_output_dir
        self._corpus: Corpus | None = None

    # lazy corpus: several stages need it, ingest once
    def corpus(self) -> Corpus:
        if self._corpus is None:
            self._corpus = ingest(
                self.config.resolve(self.config.corpus.path), self.config.corpus.format
            )
        return self._corpus

    def artifact(self, stage: str) -> Path:
        return self.out / ARTIFACTS[stage]

    def require_artifact(self, stage: str) -> Path:
        path = self.artifact(stage)
        if not path.exists():
            raise MissingUpstreamArtifact(stage, str(path))
        return path

    def require_config_path(self, value: str | None, dotted: str) -> Path:
        if not value:
            raise ConfigInvalid(dotted, "required for this stage")
        path = self.config.resolve(value)
        if not path.exists():
            raise ConfigInvalid(dotted, f"path does not exist: {path}")
        return path

    def _stamp_path(self, stage: str) -> Path:
        return self.out / STAMP_DIR / f"{stage}.json"

    def _fingerprint(self, inputs: list[Path]) -> dict:
        return {
            "config_hash": self.config.config_hash(),
            "inputs": {str(p): _file_sha256(p) for p in sorted(inputs)},
        }

    def is_fresh(self, stage: str, inputs: list[Path]) -> bool:
        if self.force or not self.artifact(stage).exists():
            return False
        stamp_path = self._stamp_path(stage)
        if not stamp_path.exists():
            return False
        try:
            recorded = json.loads(stamp_path.read_text())
        except (OSError, json.JSONDecodeError):
            return False
        return recorded == self._fingerprint(inputs)

    def write_stamp(self, stage: str, inputs: list[Path]) -> None:
        stamp_path = self._stamp_path(stage)
        stamp_path.parent.mkdir(parents=True, exist_ok=True)
        stamp_path.write_text(json.dumps(self._fingerprint(inputs), sort_keys=True))

    def append_summary(self, record: dict) -> None:
        with open(self.out / SUMMARY_FILE, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def _stage_index(runner: _StageRunner) -> tuple[list[Path], dict]:
    config = runner.config
    inputs = [config.resolve(config.corpus.path)]
    if runner.is_fresh("index", inputs):
        return inputs, {"skipped": True}
    index = lexindex.build_index(runner.corpus(), k1=config.index.k1, b=config.index.b)
    _atomic_write(runner.artifact("index"), lambda tmp: lexindex.save_index(index, tmp))
    return inputs, {"doc_count": index.doc_count, "term_count": len(index.postings)}


def _stage_generate(runner: _StageRunner) -> tuple[list[Path], dict]:
    config = runner.config
    examples_path = runner.require_config_path(config.prompt.examples_path, "prompt.examples_path")
    inputs = [config.resolve(config.corpus.path), examples_path]
    if config.backend.kind == "mock":
        script_path = runner.require_config_path(config.backend.script_path, "backend.script_path")
        inputs.append(script_path)
    if config.generation.seed is None:
        raise ConfigInvalid("generation.seed", "required for the generate stage")
    if runner.is_fresh("generate", inputs):
        return inputs, {"skipped": True}

    examples = promptkit.load_examples(examples_path)
    template = promptkit.PromptTemplate(
        mode=config.prompt.mode, examples=tuple(examples), header=config.prompt.header
    )
    if config.backend.kind == "mock":
        backend = MockBackend.from_file(script_path, corpus=runner.corpus())
    else:
        if not config.backend.endpoint:
            raise ConfigInvalid("backend.endpoint", "required for the remote backend")
        backend = RemoteBackend(config.backend.endpoint)
    gen_set = generator.run_generation(
        runner.corpus(),
        backend,
        template,
        n=config.generation.n,
        min_chars=config.generation.min_chars,
        seed=config.generation.seed,
        max_tokens=config.generation.max_tokens,
        temperature=config.generation.temperature,
        in_flight=config.generation.in_flight,
        failure_ceiling=config.generation.failure_ceiling,
    )
    _atomic_write(runner.artifact("generate"), gen_set.save)
    return inputs, {
        "n_requested": gen_set.n_requested,
        "n_succeeded": gen_set.n_succeeded,
        "n_failed": gen_set.n_failed,
        "failures": [{"doc_id": f.doc_id, "reason": f.reason} for f in gen_set.failures],
    }


def _stage_curate(runner: _StageRunner) -> tuple[list[Path], dict]:
    config = runner.config
    inputs = [runner.require_artifact("generate"), runner.require_artifact("index")]
    if config.curation.seed is None:
        raise ConfigInvalid("curation.seed", "required for the curate stage")
    if runner.is_fresh("curate", inputs):
        return inputs, {"skipped": True}
    gen_set = GenerationSet.load(runner.artifact("generate"))
    index = lexindex.load_index(runner.artifact("index"))
    stats: dict = {}
    triples = curation.build_triples(
        gen_set,
        index,
        curation.CurationConfig(
            top_k=config.curation.top_k,
            negative_pool_size=config.curation.negative_pool_size,
            seed=config.curation.seed,
        ),
        stats=stats,
    )
    _atomic_write(runner.artifact("curate"), lambda tmp: curation.write_triples(triples, tmp))
    return inputs, {"n_triples": len(triples), **stats}


def _stage_retrieve(runner: _StageRunner) -> tuple[list[Path], dict]:
    config = runner.config
    queries_path = runner.require_config_path(config.eval.queries_path, "eval.queries_path")
    inputs = [runner.require_artifact("index"), queries_path]
    if runner.is_fresh("retrieve", inputs):
        return inputs, {"skipped": True}
    index = lexindex.load_index(runner.artifact("index"))
    queries = rerankeval.read_queries(queries_path)
    run = {
        query_id: lexindex.search(index, text, config.retrieval.candidates_k, query_id=query_id)
        for query_id, text in queries
    }
    _atomic_write(
        runner.artifact("retrieve"),
        lambda tmp: rerankeval.write_run(run, tmp, tag="bm25"),
    )
    return inputs, {
        "n_queries": len(queries),
        "n_rows": sum(len(r) for r in run.values()),
    }


def _stage_rerank(runner: _StageRunner) -> tuple[list[Path], dict]:
    config = runner.config
    queries_path = runner.require_config_path(config.eval.queries_path, "eval.queries_path")
    inputs = [
        runner.require_artifact("retrieve"),
        config.resolve(config.corpus.path),
        queries_path,
    ]
    if runner.is_fresh("rerank", inputs):
        return inputs, {"skipped": True}
    first_stage = rerankeval.read_run(runner.artifact("retrieve"))
    query_text = dict(rerankeval.read_queries(queries_path))
    scorer = rerankeval.make_scorer(config.rerank.scorer, endpoint=config.rerank.endpoint)
    reranked: dict[str, lexindex.Ranking] = {}
    for query_id in sorted(first_stage.keys()):
        if query_id not in query_text:
            raise ConfigInvalid(
                "eval.queries_path", f"run contains query {query_id!r} with no query text"
            )
        reranked[query_id] = rerankeval.rerank(
            scorer,
            query_id,
            query_text[query_id],
            first_stage[query_id],
            runner.corpus(),
            window=config.rerank.window,
            stride=config.rerank.stride,
        )
    _atomic_write(
        runner.artifact("rerank"),
        lambda tmp: rerankeval.write_run(reranked, tmp, tag=config.rerank.scorer),
    )
    return inputs, {"n_queries": len(reranked)}


def _stage_evaluate(runner: _StageRunner) -> tuple[list[Path], dict]:
    config = runner.config
    qrels_path = runner.require_config_path(config.eval.qrels_path, "eval.qrels_path")
    reranked = runner.artifact("rerank")
    if reranked.exists():
        run_path = reranked
    else:
        run_path = runner.artifact("retrieve")
        if not run_path.exists():
            raise MissingUpstreamArtifact("retrieve", str(runner.artifact("retrieve")))
    inputs = [run_path, qrels_path]
    if runner.is_fresh("evaluate", inputs):
        return inputs, {"skipped": True}
    run = rerankeval.read_run(run_path)
    qrels = rerankeval.read_qrels(qrels_path)
    report = rerankeval.evaluate(
        run,
        qrels,
        metrics=list(config.eval.metrics),
        rel_threshold=config.eval.rel_threshold,
    )
    _atomic_write(runner.artifact("evaluate"), report.save)
    return inputs, {"run_file": run_path.name, **{k: round(v, 6) for k, v in report.aggregates.items()}}


_STAGE_FUNCS = {
    "index": _stage_index,
    "generate": _stage_generate,
    "curate": _stage_curate,
    "retrieve": _stage_retrieve,
    "rerank": _stage_rerank,
    "evaluate": _stage_evaluate,
}


def run_stage(config: PipelineConfig, stage: str, force: bool = False) -> list[dict]:
    """Run one stage, or all of them in order. Returns one summary record
    per executed stage."""
    if stage != "all" and stage not in STAGES:
        raise ValueError(f"unknown stage: {stage!r}")
    stages = STAGES if stage == "all" else (stage,)
    summaries = []
    with output_lock(config.resolved_output_dir):
        runner = _StageRunner(config, force=force)
        for name in stages:
            started = time.monotonic()
            inputs, counts = _STAGE_FUNCS[name](runner)
            skipped = counts.pop("skipped", False)
            if not skipped:
                runner.write_stamp(name, inputs)
            record = {
                "stage": name,
                "config_hash": config.config_hash(),
                "skipped": skipped,
                "counts": counts,
                "duration_s": round(time.monotonic() - started, 6),
                "timestamp": datetime.now(timezone.utc).isoformat(),
            }
            runner.append_summary(record)
            log.info(
                "stage %-8s %s (%.2fs)",
                name, "skipped (fresh)" if skipped else "done", record["duration_s"],
            )
            summaries.append(record)
    return summaries
