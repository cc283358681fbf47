import json

import numpy as np
import pytest

from stilab.attributes import load_attribute_records
from stilab.cli import main
from stilab.corpus import load_corpus
from stilab.evaluation import evaluate_split
from stilab.sti import InteractionToggles
from stilab.trainer import load_checkpoint
from stilab.workflow import params_from_store, training_data_for

SMALL_SYNTH = [
    "--num-concepts", "8", "--seen-classes", "4", "--unseen-classes", "2",
    "--videos-per-class", "4", "--frames", "4", "--patches-per-frame", "6",
    "--dim", "16",
]


def run_cli(*argv):
    return main([str(a) for a in argv])


@pytest.fixture()
def synth_dir(tmp_path):
    out = tmp_path / "synth"
    assert run_cli("synth", "--seed", 3, "--out-dir", out, *SMALL_SYNTH) == 0
    return out


@pytest.fixture()
def trained(synth_dir, tmp_path):
    out = tmp_path / "train"
    code = run_cli(
        "train", "--seed", 3, "--out-dir", out, "--corpus", synth_dir / "corpus",
        "--epochs", 3, "--batch-size", 8,
    )
    assert code == 0
    return out


class TestSynth:
    def test_writes_corpus_and_manifest(self, synth_dir):
        assert (synth_dir / "corpus" / "descriptions.jsonl").exists()
        assert (synth_dir / "corpus" / "videos.bin").exists()
        manifest = json.loads((synth_dir / "manifest.json").read_text())
        assert manifest["command"] == "synth"
        assert manifest["seed"] == 3
        assert manifest["corpus_fingerprint"]
        for artifact in manifest["artifacts"]:
            assert (synth_dir / artifact).exists()

    def test_same_seed_produces_identical_corpus_bytes(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        run_cli("synth", "--seed", 9, "--out-dir", a, *SMALL_SYNTH)
        run_cli("synth", "--seed", 9, "--out-dir", b, *SMALL_SYNTH)
        for name in ("descriptions.jsonl", "videos.bin", "corpus.json"):
            assert (a / "corpus" / name).read_bytes() == (b / "corpus" / name).read_bytes()


class TestAttrs:
    def test_mock_attribute_records(self, synth_dir, tmp_path):
        out = tmp_path / "attrs"
        code = run_cli(
            "attrs", "--out-dir", out,
            "--corpus", synth_dir / "corpus" / "descriptions.jsonl",
            "--num-attributes", 8,
        )
        assert code == 0
        records = load_attribute_records(out / "attributes.jsonl")
        assert len(records) == 6
        assert all(len(r.keywords) <= 8 for r in records)
        assert all(r.extractor == "mock" for r in records)

    def test_zero_attributes_gives_bare_sentences(self, synth_dir, tmp_path):
        out = tmp_path / "attrs0"
        run_cli(
            "attrs", "--out-dir", out,
            "--corpus", synth_dir / "corpus" / "descriptions.jsonl",
            "--num-attributes", 0,
        )
        records = load_attribute_records(out / "attributes.jsonl")
        for record in records:
            assert record.keywords == ()
            assert record.prompt_sentence == f"This is a video about {record.class_name}."

    def test_unreadable_corpus_fails_with_error(self, tmp_path, capsys):
        code = run_cli("attrs", "--out-dir", tmp_path / "x", "--corpus", tmp_path / "missing.jsonl")
        assert code == 1
        assert "error" in capsys.readouterr().err


class TestTrain:
    def test_writes_checkpoint_loss_and_manifest(self, trained):
        checkpoint = load_checkpoint(trained / "checkpoint.stickpt")
        assert checkpoint.epoch == 3
        lines = (trained / "loss.csv").read_text().splitlines()
        assert lines[0] == "epoch,mean_loss"
        assert len(lines) == 4
        manifest = json.loads((trained / "manifest.json").read_text())
        assert set(manifest["artifacts"]) == {"checkpoint.stickpt", "loss.csv"}

    def test_identical_runs_are_byte_identical(self, synth_dir, tmp_path):
        outs = []
        for name in ("r1", "r2"):
            out = tmp_path / name
            run_cli("train", "--seed", 5, "--out-dir", out,
                    "--corpus", synth_dir / "corpus", "--epochs", 2, "--batch-size", 8)
            outs.append(out)
        a, b = outs
        assert (a / "checkpoint.stickpt").read_bytes() == (b / "checkpoint.stickpt").read_bytes()
        assert (a / "loss.csv").read_bytes() == (b / "loss.csv").read_bytes()


class TestEval:
    def test_zero_shot_metrics_csv(self, synth_dir, trained, tmp_path):
        out = tmp_path / "eval"
        code = run_cli(
            "eval", "--seed", 3, "--out-dir", out, "--corpus", synth_dir / "corpus",
            "--checkpoint", trained / "checkpoint.stickpt",
        )
        assert code == 0
        lines = (out / "metrics.csv").read_text().splitlines()
        assert lines[0] == "split_id,top1,top5"
        assert len(lines) == 6

    def test_mean_pool_toggles_reproduce_library_baseline(self, synth_dir, trained, tmp_path):
        out = tmp_path / "eval-off"
        run_cli(
            "eval", "--seed", 3, "--out-dir", out, "--corpus", synth_dir / "corpus",
            "--checkpoint", trained / "checkpoint.stickpt",
            "--no-spatial", "--no-temporal",
        )
        lines = (out / "metrics.csv").read_text().splitlines()
        csv_top1 = float(lines[1].split(",")[1])

        corpus = load_corpus(synth_dir / "corpus")
        checkpoint = load_checkpoint(trained / "checkpoint.stickpt")
        enc, sti = params_from_store(
            checkpoint.store, text_table_seed=corpus.spec.seed, dim=corpus.spec.dim
        )
        data, _ = training_data_for(corpus, corpus.unseen_class_indices, 8, enc)
        top1, _ = evaluate_split(
            data.videos, data.labels, [ct.sequence for ct in data.class_texts],
            sti, enc, InteractionToggles(False, False),
        )
        assert csv_top1 == top1

    def test_few_shot_mode(self, synth_dir, trained, tmp_path):
        out = tmp_path / "eval-few"
        code = run_cli(
            "eval", "--seed", 3, "--out-dir", out, "--corpus", synth_dir / "corpus",
            "--checkpoint", trained / "checkpoint.stickpt",
            "--mode", "few-shot", "--shots", 2, "--finetune-epochs", 2,
        )
        assert code == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["results"]["mode"] == "few-shot"
        assert manifest["results"]["shots"] == 2

    def test_identical_eval_runs_are_byte_identical(self, synth_dir, trained, tmp_path):
        outs = []
        for name in ("e1", "e2"):
            out = tmp_path / name
            run_cli("eval", "--seed", 3, "--out-dir", out, "--corpus", synth_dir / "corpus",
                    "--checkpoint", trained / "checkpoint.stickpt")
            outs.append(out)
        assert (outs[0] / "metrics.csv").read_bytes() == (outs[1] / "metrics.csv").read_bytes()


class TestSaliency:
    def test_export_for_known_pair(self, synth_dir, trained, tmp_path):
        out = tmp_path / "sal"
        code = run_cli(
            "saliency", "--seed", 3, "--out-dir", out, "--corpus", synth_dir / "corpus",
            "--checkpoint", trained / "checkpoint.stickpt",
            "--video-id", "vid00_000", "--class-name", "activity00",
        )
        assert code == 0
        lines = (out / "saliency_vid00_000_activity00.csv").read_text().splitlines()
        assert lines[0] == "frame_index,s_sp,s_temp"
        assert len(lines) == 5  # 4 frames
        weights = [float(line.split(",")[2]) for line in lines[1:]]
        assert abs(sum(weights) - 1.0) < 1e-9

    def test_unknown_video_id_fails(self, synth_dir, trained, tmp_path, capsys):
        code = run_cli(
            "saliency", "--out-dir", tmp_path / "x", "--corpus", synth_dir / "corpus",
            "--checkpoint", trained / "checkpoint.stickpt",
            "--video-id", "nope", "--class-name", "activity00",
        )
        assert code == 1
        assert "unknown video id" in capsys.readouterr().err


class TestConfigFile:
    def test_file_values_apply_and_cli_overrides(self, tmp_path):
        config_path = tmp_path / "config.json"
        config_path.write_text(json.dumps({"videos-per-class": 3, "dim": 16, "frames": 4,
                                           "patches-per-frame": 6, "num-concepts": 8,
                                           "seen-classes": 4, "unseen-classes": 2}))
        out = tmp_path / "out"
        code = run_cli("synth", "--seed", 1, "--out-dir", out, "--config", config_path,
                       "--videos-per-class", 2)
        assert code == 0
        corpus = load_corpus(out / "corpus")
        assert corpus.spec.videos_per_class == 2  # CLI wins
        assert corpus.spec.dim == 16  # file value applies

    def test_manifest_records_effective_config(self, tmp_path):
        out = tmp_path / "out"
        run_cli("synth", "--seed", 2, "--out-dir", out, *SMALL_SYNTH)
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["config"]["dim"] == 16
        assert manifest["config"]["seed"] == 2
