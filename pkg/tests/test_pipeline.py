"""Tests for config parsing, hashing, stage orchestration, and the CLI."""
import json

import pytest

from inpars.cli import main as cli_main
from inpars.errors import ConfigInvalid, MissingUpstreamArtifact, OutputDirLocked
from inpars.pipeline import load_config, output_lock, run_stage

from conftest import DATA_DIR

DEMO = DATA_DIR / "demo"


def demo_config(tmp_path, name="config.toml", **overrides):
    """Write a config pointing at the shipped demo data with tmp output."""
    values = {
        "n": 24,
        "top_k": 12,
        "pool": 20,
        "candidates": 50,
        "gen_seed": 4242,
        "cur_seed": 777,
        "metrics": '["mrr@10", "map", "ndcg@10"]',
        "extra": "",
    }
    values.update(overrides)
    text = f"""
[corpus]
path = "{DEMO / 'corpus.jsonl'}"
format = "jsonl"

[prompt]
mode = "vanilla"
examples_path = "{DATA_DIR / 'examples_vanilla.jsonl'}"

[backend]
kind = "mock"
script_path = "{DEMO / 'mock_script.jsonl'}"

[generation]
n = {values['n']}
min_chars = 300
seed = {values['gen_seed']}

[curation]
top_k = {values['top_k']}
negative_pool_size = {values['pool']}
seed = {values['cur_seed']}

[retrieval]
candidates_k = {values['candidates']}

[eval]
queries_path = "{DEMO / 'queries.tsv'}"
qrels_path = "{DEMO / 'qrels.txt'}"
metrics = {values['metrics']}

[output]
dir = "{tmp_path / 'out'}"
{values['extra']}
"""
    path = tmp_path / name
    path.write_text(text)
    return path


class TestLoadConfig:
    def test_demo_config_parses(self):
        config = load_config(DEMO / "config.toml")
        assert config.generation.n == 120
        assert config.curation.top_k == 60
        assert config.retrieval.candidates_k == 100
        assert config.eval.metrics[0] == "mrr@10"

    def test_relative_paths_resolve_against_config_dir(self):
        config = load_config(DEMO / "config.toml")
        assert config.resolve(config.corpus.path) == (DEMO / "corpus.jsonl").resolve()

    def test_unknown_key_is_hard_error(self, tmp_path):
        path = demo_config(tmp_path, extra="\n[generation2]\nn = 5\n")
        with pytest.raises(ConfigInvalid):
            load_config(path)

    def test_unknown_key_in_section(self, tmp_path):
        path = demo_config(tmp_path, extra="")
        text = path.read_text().replace("min_chars = 300", "min_chars = 300\nmystery = 1")
        path.write_text(text)
        with pytest.raises(ConfigInvalid) as exc_info:
            load_config(path)
        assert "mystery" in str(exc_info.value)

    def test_missing_corpus_path(self, tmp_path):
        path = tmp_path / "bad.toml"
        path.write_text("[index]\nk1 = 0.9\n")
        with pytest.raises(ConfigInvalid):
            load_config(path)

    def test_bad_metric_rejected(self, tmp_path):
        path = demo_config(tmp_path, metrics='["bleu"]')
        with pytest.raises(Exception):
            load_config(path)

    def test_type_error_reported(self, tmp_path):
        path = demo_config(tmp_path)
        path.write_text(path.read_text().replace("n = 24", 'n = "many"'))
        with pytest.raises(ConfigInvalid):
            load_config(path)


class TestConfigHash:
    def test_comments_and_whitespace_ignored(self, tmp_path):
        first = load_config(demo_config(tmp_path, name="a.toml"))
        noisy = demo_config(tmp_path, name="b.toml")
        noisy.write_text("# a leading comment\n\n" + noisy.read_text().replace(
            "min_chars = 300", "min_chars  =   300   # inline comment"
        ))
        second = load_config(noisy)
        assert first.config_hash() == second.config_hash()

    def test_semantic_change_changes_hash(self, tmp_path):
        base = load_config(demo_config(tmp_path, name="a.toml"))
        changed = load_config(demo_config(tmp_path, name="b.toml", top_k=13))
        assert base.config_hash() != changed.config_hash()

    def test_output_dir_not_semantic(self, tmp_path):
        config = load_config(demo_config(tmp_path))
        assert config.config_hash() == config.with_output_dir("elsewhere").config_hash()

    def test_seed_override_changes_hash(self, tmp_path):
        config = load_config(demo_config(tmp_path))
        assert config.config_hash() != config.with_seed(1).config_hash()


class TestStageOrchestration:
    def test_all_produces_artifacts(self, tmp_path):
        config = load_config(demo_config(tmp_path))
        summaries = run_stage(config, "all")
        assert [s["stage"] for s in summaries] == [
            "index", "generate", "curate", "retrieve", "rerank", "evaluate",
        ]
        out = config.resolved_output_dir
        for artifact in ("index.json", "generated.jsonl", "triples.tsv",
                         "run.bm25.txt", "run.reranked.txt", "metrics.json"):
            assert (out / artifact).exists(), artifact
        assert (out / "summary.jsonl").exists()

    def test_rerun_is_noop(self, tmp_path):
        config = load_config(demo_config(tmp_path))
        run_stage(config, "all")
        again = run_stage(config, "all")
        assert all(s["skipped"] for s in again)

    def test_force_reruns(self, tmp_path):
        config = load_config(demo_config(tmp_path))
        run_stage(config, "index")
        forced = run_stage(config, "index", force=True)
        assert forced[0]["skipped"] is False

    def test_config_change_invalidates(self, tmp_path):
        config = load_config(demo_config(tmp_path, name="a.toml"))
        run_stage(config, "all")
        changed = load_config(demo_config(tmp_path, name="b.toml", top_k=13))
        summaries = run_stage(changed, "curate")
        assert summaries[0]["skipped"] is False
        assert summaries[0]["counts"]["n_triples"] == 13

    def test_evaluate_without_run_is_missing_upstream(self, tmp_path):
        config = load_config(demo_config(tmp_path))
        with pytest.raises(MissingUpstreamArtifact) as exc_info:
            run_stage(config, "evaluate")
        assert exc_info.value.stage == "retrieve"

    def test_curate_without_generate(self, tmp_path):
        config = load_config(demo_config(tmp_path))
        run_stage(config, "index")
        with pytest.raises(MissingUpstreamArtifact) as exc_info:
            run_stage(config, "curate")
        assert exc_info.value.stage == "generate"

    def test_top_k_saturation(self, tmp_path):
        config = load_config(demo_config(tmp_path, n=24, top_k=10000))
        run_stage(config, "all")
        triples = (config.resolved_output_dir / "triples.tsv").read_text().splitlines()
        assert len(triples) == 24

    def test_evaluate_uses_bm25_run_when_no_rerank(self, tmp_path):
        config = load_config(demo_config(tmp_path))
        for stage in ("index", "retrieve", "evaluate"):
            run_stage(config, stage)
        metrics = json.loads((config.resolved_output_dir / "metrics.json").read_text())
        assert "mrr@10" in metrics["metrics"]

    def test_generation_counts_in_summary(self, tmp_path):
        config = load_config(demo_config(tmp_path))
        summaries = run_stage(config, "all")
        generate = next(s for s in summaries if s["stage"] == "generate")
        assert generate["counts"]["n_requested"] == 24
        assert generate["counts"]["n_succeeded"] == 24


class TestLock:
    def test_second_acquisition_fails(self, tmp_path):
        out = tmp_path / "out"
        with output_lock(out):
            with pytest.raises(OutputDirLocked):
                with output_lock(out):
                    pass

    def test_lock_released(self, tmp_path):
        out = tmp_path / "out"
        with output_lock(out):
            pass
        with output_lock(out):
            pass


class TestCli:
    def test_all_exit_zero(self, tmp_path, capsys):
        config_path = demo_config(tmp_path)
        assert cli_main(["all", "--config", str(config_path)]) == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["ok"] is True
        assert len(payload["stages"]) == 6

    def test_stage_output_override(self, tmp_path, capsys):
        config_path = demo_config(tmp_path)
        override = tmp_path / "elsewhere"
        assert cli_main([
            "index", "--config", str(config_path), "--stage-output", str(override),
        ]) == 0
        assert (override / "index.json").exists()

    def test_error_is_machine_readable(self, tmp_path, capsys):
        config_path = demo_config(tmp_path)
        code = cli_main(["evaluate", "--config", str(config_path)])
        captured = capsys.readouterr()
        assert code == 1
        error = json.loads(captured.err.strip().splitlines()[-1])
        assert error["error"] == "MissingUpstreamArtifact"

    def test_seed_override_changes_negatives(self, tmp_path, capsys):
        config_path = demo_config(tmp_path)
        out_a = tmp_path / "a"
        out_b = tmp_path / "b"
        out_c = tmp_path / "c"
        for out, seed in ((out_a, "1"), (out_b, "2"), (out_c, "1")):
            assert cli_main([
                "all", "--config", str(config_path),
                "--stage-output", str(out), "--seed", seed,
            ]) == 0
        same = (out_a / "triples.tsv").read_bytes() == (out_c / "triples.tsv").read_bytes()
        different = (out_a / "triples.tsv").read_bytes() != (out_b / "triples.tsv").read_bytes()
        assert same and different

    def test_export_round_trip(self, tmp_path, capsys):
        source = tmp_path / "corpus.tsv"
        source.write_text("d1\thello world\nd2\tsecond doc\n")
        exported = tmp_path / "corpus.jsonl"
        assert cli_main([
            "export", "--corpus", str(source), "--corpus-format", "tsv",
            "--output", str(exported),
        ]) == 0
        lines = [json.loads(line) for line in exported.read_text().splitlines()]
        assert lines == [
            {"_id": "d1", "text": "hello world"},
            {"_id": "d2", "text": "second doc"},
        ]
