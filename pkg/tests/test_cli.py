"""End-to-end command-line flows on the synthetic corpus."""

import json

import numpy as np
import pytest
from click.testing import CliRunner

from playerreid.cli import main
from playerreid.embeddings import load_embedding_cache
from playerreid.errors import EvaluationError


@pytest.fixture(scope="module")
def runner():
    return CliRunner()


def invoke(runner, args):
    result = runner.invoke(main, args, catch_exceptions=False)
    assert result.exit_code == 0, result.output
    return result


@pytest.fixture(scope="module")
def cli_corpus(tmp_path_factory, runner):
    out = tmp_path_factory.mktemp("clicorpus")
    invoke(
        runner,
        ["synth", str(out), "--players", "16", "--gallery", "3", "--test-gallery", "2", "--seed", "1"],
    )
    return out

@pytest.fixture(scope="module")
def run_dir(tmp_path_factory, runner, cli_corpus):
    out = tmp_path_factory.mktemp("clirun") / "run"
    invoke(
        runner,
        [
            "train",
            "--train-manifest", str(cli_corpus / "train.csv"),
            "--eval-manifest", str(cli_corpus / "test.csv"),
            "--encoder", "tiny",
            "--epochs", "2",
            "--batch-size", "8",
            "--seed", "3",
            "--output-dir", str(out),
        ],
    )
    return out


class TestSynthAndIngest:
    def test_synth_wrote_manifests(self, cli_corpus):
        assert (cli_corpus / "train.csv").is_file()
        assert (cli_corpus / "test.csv").is_file()
        assert (cli_corpus / "attributes.csv").is_file()

    def test_synth_refuses_overwrite(self, runner, cli_corpus):
        result = runner.invoke(main, ["synth", str(cli_corpus)])
        assert result.exit_code != 0

    def test_ingest_reports_counts(self, runner, cli_corpus):
        result = invoke(runner, ["ingest", str(cli_corpus / "train.csv")])
        assert "16 players" in result.output
        assert "query: 16" in result.output
        assert "gallery: 48" in result.output

    def test_ingest_merge_splits(self, runner, cli_corpus, tmp_path):
        merged = tmp_path / "merged.csv"
        result = invoke(
            runner,
            [
                "ingest",
                str(cli_corpus / "train.csv"),
                str(cli_corpus / "test.csv"),
                "--merge-splits",
                "--out", str(merged),
            ],
        )
        assert merged.is_file()
        assert "records" in result.output

    def test_ingest_multiple_without_flag_fails(self, runner, cli_corpus):
        result = runner.invoke(
            main, ["ingest", str(cli_corpus / "train.csv"), str(cli_corpus / "test.csv")]
        )
        assert result.exit_code != 0

    def test_ingest_with_annotations(self, runner, cli_corpus):
        result = invoke(
            runner,
            ["ingest", str(cli_corpus / "train.csv"), "--annotations", str(cli_corpus / "attributes.csv")],
        )
        assert "attribute annotations: 16" in result.output


class TestTrain:
    def test_run_directory_artifacts(self, run_dir):
        assert (run_dir / "config.resolved.json").is_file()
        assert (run_dir / "history.jsonl").is_file()
        assert (run_dir / "best").is_file()
        resolved = json.loads((run_dir / "config.resolved.json").read_text())
        assert "config_hash" in resolved

    def test_checkpoints_carry_config_hash(self, run_dir):
        resolved = json.loads((run_dir / "config.resolved.json").read_text())
        best_name = (run_dir / "best").read_text().strip()
        header = json.loads((run_dir / (best_name + ".json")).read_text())
        assert header["extra"]["config_hash"] == resolved["config_hash"]

    def test_refuses_nonempty_run_dir(self, runner, cli_corpus, run_dir):
        result = runner.invoke(
            main,
            [
                "train",
                "--train-manifest", str(cli_corpus / "train.csv"),
                "--eval-manifest", str(cli_corpus / "test.csv"),
                "--output-dir", str(run_dir),
                "--epochs", "2",
            ],
        )
        assert result.exit_code != 0

    def test_missing_dataset_is_early_error(self, runner, tmp_path):
        result = runner.invoke(main, ["train", "--output-dir", str(tmp_path / "x")])
        assert result.exit_code != 0

    def test_config_file_with_overrides(self, runner, cli_corpus, tmp_path):
        config = {
            "seed": 9,
            "output_dir": str(tmp_path / "cfgreRun"),
            "dataset": {
                "train_manifests": [str(cli_corpus / "train.csv")],
                "eval_manifest": str(cli_corpus / "test.csv"),
            },
            "encoder": {"name": "tiny"},
            "sampler": {"batch_size": 8},
            "train": {"epochs": 2, "warmup_epochs": 1.0},
            "eval": {"rerank": False},
        }
        config_path = tmp_path / "run.json"
        config_path.write_text(json.dumps(config))
        result = invoke(runner, ["train", "--config", str(config_path)])
        assert "best checkpoint" in result.output

    def test_same_seed_reruns_match_history(self, runner, cli_corpus, tmp_path):
        args = [
            "train",
            "--train-manifest", str(cli_corpus / "train.csv"),
            "--eval-manifest", str(cli_corpus / "test.csv"),
            "--epochs", "2",
            "--batch-size", "8",
            "--seed", "11",
        ]
        invoke(runner, args + ["--output-dir", str(tmp_path / "r1")])
        invoke(runner, args + ["--output-dir", str(tmp_path / "r2")])
        h1 = (tmp_path / "r1" / "history.jsonl").read_text()
        h2 = (tmp_path / "r2" / "history.jsonl").read_text()
        assert h1 == h2  # rows carry no timestamps, so logs match bitwise


@pytest.fixture(scope="module")
def caches(tmp_path_factory, runner, cli_corpus, run_dir):
    out = tmp_path_factory.mktemp("caches")
    best = (run_dir / "best").read_text().strip()
    ckpt = run_dir / best
    for role in ("query", "gallery"):
        invoke(
            runner,
            [
                "embed",
                "--checkpoint", str(ckpt),
                "--manifest", str(cli_corpus / "test.csv"),
                "--role", role,
                "--out", str(out / f"{role}.bin"),
            ],
        )
    return out


class TestEmbedAndEvaluate:
    def test_cache_payload_shape(self, caches):
        matrix, sidecar = load_embedding_cache(caches / "query.bin")
        assert matrix.n == 16 and matrix.dim == 32
        assert sidecar["encoder_name"] == "tiny"
        assert len(sidecar["ids"]) == 16
        payload = (caches / "query.bin").stat().st_size
        assert payload == 16 * 32 * 4  # float32 payload bytes

    def test_cache_round_trip_exact(self, caches, tmp_path):
        matrix, _ = load_embedding_cache(caches / "query.bin")
        from playerreid.embeddings import save_embedding_cache

        save_embedding_cache(matrix, tmp_path / "copy.bin")
        again, _ = load_embedding_cache(tmp_path / "copy.bin")
        np.testing.assert_array_equal(matrix.vectors, again.vectors)
        assert matrix.ids == again.ids and matrix.pids == again.pids

    def test_corrupted_payload_checksum_error(self, caches, tmp_path):
        src = (caches / "query.bin").read_bytes()
        bad = tmp_path / "bad.bin"
        bad.write_bytes(src[:-4] + b"\x00\x00\x00\x01")
        (tmp_path / "bad.bin.json").write_text((caches / "query.bin.json").read_text())
        with pytest.raises(EvaluationError, match="checksum"):
            load_embedding_cache(bad)

    def test_evaluate_prints_and_persists(self, runner, caches, tmp_path):
        report_path = tmp_path / "report.json"
        result = invoke(
            runner,
            [
                "evaluate",
                "--query-cache", str(caches / "query.bin"),
                "--gallery-cache", str(caches / "gallery.bin"),
                "--k1", "8", "--k2", "3",
                "--out", str(report_path),
            ],
        )
        assert "mAP (no rerank)" in result.output
        assert "mAP (reranked)" in result.output
        assert "rank-1" in result.output and "rank-5" in result.output
        payload = json.loads(report_path.read_text())
        assert payload["raw"]["mean_ap"] >= 0.0
        assert payload["reranked"]["rerank_params"] == {"k1": 8, "k2": 3, "lambda": 0.3}

    def test_evaluate_report_matches_schema(self, runner, caches, tmp_path):
        import jsonschema

        from playerreid.eval import EVAL_REPORT_SCHEMA

        report_path = tmp_path / "report.json"
        invoke(
            runner,
            [
                "evaluate",
                "--query-cache", str(caches / "query.bin"),
                "--gallery-cache", str(caches / "gallery.bin"),
                "--k1", "8", "--k2", "3",
                "--out", str(report_path),
            ],
        )
        jsonschema.validate(json.loads(report_path.read_text()), EVAL_REPORT_SCHEMA)

    def test_lambda_one_rerank_equals_raw(self, runner, caches, tmp_path):
        report_path = tmp_path / "report.json"
        invoke(
            runner,
            [
                "evaluate",
                "--query-cache", str(caches / "query.bin"),
                "--gallery-cache", str(caches / "gallery.bin"),
                "--k1", "8", "--k2", "3", "--lambda", "1.0",
                "--out", str(report_path),
            ],
        )
        payload = json.loads(report_path.read_text())
        assert payload["reranked"]["mean_ap"] == pytest.approx(payload["raw"]["mean_ap"], abs=1e-12)

    def test_dimension_mismatch_rejected(self, runner, caches, tmp_path):
        from playerreid.embeddings import EmbeddingMatrix, save_embedding_cache

        other = EmbeddingMatrix(
            ids=["a"], pids=["p"], vectors=np.ones((1, 8), dtype=np.float32) / np.sqrt(8)
        )
        save_embedding_cache(other, tmp_path / "other.bin")
        result = runner.invoke(
            main,
            [
                "evaluate",
                "--query-cache", str(tmp_path / "other.bin"),
                "--gallery-cache", str(caches / "gallery.bin"),
            ],
        )
        assert result.exit_code != 0


class TestZeroshotCommand:
    def test_reports_per_attribute(self, runner, cli_corpus, tmp_path):
        out_dir = tmp_path / "zs"
        result = invoke(
            runner,
            [
                "zeroshot",
                "--encoder", "tiny",
                "--manifest", str(cli_corpus / "train.csv"),
                "--annotations", str(cli_corpus / "attributes.csv"),
                "--attributes", "sex,jersey_colour",
                "--out-dir", str(out_dir),
            ],
        )
        assert (out_dir / "zeroshot_sex.json").is_file()
        assert (out_dir / "confusion_sex.csv").is_file()
        assert (out_dir / "zeroshot_jersey_colour.json").is_file()
        assert "macroF1" in result.output
        payload = json.loads((out_dir / "zeroshot_sex.json").read_text())
        assert "config_hash" in payload
        assert payload["n_samples"] == 16

    def test_fine_tuned_checkpoint_refused(self, runner, cli_corpus, run_dir, tmp_path):
        best = (run_dir / "best").read_text().strip()
        result = runner.invoke(
            main,
            [
                "zeroshot",
                "--checkpoint", str(run_dir / best),
                "--manifest", str(cli_corpus / "train.csv"),
                "--annotations", str(cli_corpus / "attributes.csv"),
                "--out-dir", str(tmp_path / "zs"),
            ],
        )
        assert result.exit_code != 0

    def test_empty_attribute_list_rejected(self, runner, cli_corpus, tmp_path):
        result = runner.invoke(
            main,
            [
                "zeroshot",
                "--encoder", "tiny",
                "--manifest", str(cli_corpus / "train.csv"),
                "--annotations", str(cli_corpus / "attributes.csv"),
                "--attributes", " , ",
                "--out-dir", str(tmp_path / "zs"),
            ],
        )
        assert result.exit_code != 0


class TestExplainCommand:
    def image_of(self, cli_corpus):
        import csv

        with (cli_corpus / "test.csv").open() as fh:
            rows = list(csv.DictReader(fh))
        return rows[0]["image_path"], rows[1]["image_path"]

    def test_image_image_mode(self, runner, cli_corpus, run_dir, tmp_path):
        query, gallery = self.image_of(cli_corpus)
        best = (run_dir / "best").read_text().strip()
        prefix = tmp_path / "cam"
        invoke(
            runner,
            [
                "explain",
                "--checkpoint", str(run_dir / best),
                "--query-image", query,
                "--gallery-image", gallery,
                "--layer", "conv2",
                "--out-prefix", str(prefix),
            ],
        )
        assert (tmp_path / "cam.png").is_file()
        assert (tmp_path / "cam_overlay.png").is_file()
        meta = json.loads((tmp_path / "cam.json").read_text())
        assert 0.0 <= meta["min"] and meta["max"] <= 1.0

    def test_prompt_mode_with_tiny(self, runner, cli_corpus, tmp_path):
        _, gallery = self.image_of(cli_corpus)
        invoke(
            runner,
            [
                "explain",
                "--encoder", "tiny",
                "--gallery-image", gallery,
                "--prompt-number", "7",
                "--layer", "conv2",
                "--out-prefix", str(tmp_path / "cam"),
            ],
        )
        assert (tmp_path / "cam.png").is_file()

    def test_prompt_mode_with_fine_tuned_refused(self, runner, cli_corpus, run_dir, tmp_path):
        _, gallery = self.image_of(cli_corpus)
        best = (run_dir / "best").read_text().strip()
        result = runner.invoke(
            main,
            [
                "explain",
                "--checkpoint", str(run_dir / best),
                "--gallery-image", gallery,
                "--prompt-number", "7",
                "--layer", "conv2",
                "--out-prefix", str(tmp_path / "cam"),
            ],
        )
        assert result.exit_code != 0

    def test_exactly_one_mode_required(self, runner, cli_corpus, tmp_path):
        _, gallery = self.image_of(cli_corpus)
        result = runner.invoke(
            main,
            ["explain", "--gallery-image", gallery, "--layer", "conv1",
             "--out-prefix", str(tmp_path / "cam")],
        )
        assert result.exit_code != 0

    def test_deterministic_outputs(self, runner, cli_corpus, tmp_path):
        query, gallery = self.image_of(cli_corpus)
        for sub in ("a", "b"):
            invoke(
                runner,
                [
                    "explain",
                    "--encoder", "tiny",
                    "--query-image", query,
                    "--gallery-image", gallery,
                    "--layer", "conv1",
                    "--out-prefix", str(tmp_path / sub / "cam"),
                ],
            )
        assert (tmp_path / "a" / "cam.png").read_bytes() == (tmp_path / "b" / "cam.png").read_bytes()

    def test_refuses_overwrite(self, runner, cli_corpus, tmp_path):
        query, gallery = self.image_of(cli_corpus)
        args = [
            "explain", "--encoder", "tiny", "--query-image", query,
            "--gallery-image", gallery, "--layer", "conv1",
            "--out-prefix", str(tmp_path / "cam"),
        ]
        invoke(runner, args)
        result = runner.invoke(main, args)
        assert result.exit_code != 0
