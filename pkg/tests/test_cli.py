"""Command-line client: flag handling, exit codes, artifact flow."""

import json

import numpy as np
import pytest

from relayformer.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main


def run(argv):
    return main(argv)


@pytest.fixture()
def dataset_dir(tmp_path):
    out = tmp_path / "data"
    assert run(["gen-data", "--out", str(out), "--classes", "3", "--per-class", "4",
                "--joints", "4", "--frames", "6", "--seed", "5"]) == EXIT_OK
    return out


def quick_train_args(dataset_dir, out_dir, config_path):
    config_path.write_text(json.dumps({
        "train": {"epochs": 2, "batch_size": 6, "warmup_steps": 5,
                  "lr_start": 1e-4, "lr_peak": 1e-2, "decay_gamma": 0.999,
                  "augment_max_angle": 0.0, "seed": 1},
    }))
    return ["train", "--data", str(dataset_dir), "--out", str(out_dir),
            "--config", str(config_path)]


class TestGenData:
    def test_deterministic_rerun_byte_identical(self, tmp_path):
        args = ["gen-data", "--classes", "2", "--per-class", "3",
                "--joints", "4", "--frames", "5", "--seed", "7"]
        assert run(args + ["--out", str(tmp_path / "a")]) == EXIT_OK
        assert run(args + ["--out", str(tmp_path / "b")]) == EXIT_OK
        assert (tmp_path / "a" / "manifest.json").read_bytes() == \
               (tmp_path / "b" / "manifest.json").read_bytes()

    def test_zero_classes_is_usage_error(self, tmp_path):
        assert run(["gen-data", "--out", str(tmp_path / "x"),
                    "--classes", "0"]) == EXIT_USAGE

    def test_missing_out_is_usage_error(self):
        assert run(["gen-data", "--classes", "2"]) == EXIT_USAGE

    def test_unknown_command_is_usage_error(self):
        assert run(["frobnicate"]) == EXIT_USAGE


class TestTrainEval:
    def test_full_flow(self, tmp_path, dataset_dir):
        out = tmp_path / "run"
        assert run(quick_train_args(dataset_dir, out, tmp_path / "cfg.json")) == EXIT_OK
        assert (out / "checkpoint" / "metadata.json").exists()
        assert run(["eval", "--checkpoint", str(out / "checkpoint"),
                    "--data", str(dataset_dir), "--split", "val",
                    "--out", str(tmp_path / "eval")]) == EXIT_OK
        metrics = json.loads((tmp_path / "eval" / "metrics.json").read_text())
        confusion = np.array(metrics["confusion"])
        manifest = json.loads((dataset_dir / "manifest.json").read_text())
        val_entries = [s for s in manifest["samples"] if s["split"] == "val"]
        assert confusion.sum() == len(val_entries) > 0
        # row sums equal the per-class sample counts of the split
        for label in range(confusion.shape[0]):
            expected = sum(1 for s in val_entries if s["label"] == label)
            assert confusion[label].sum() == expected

    def test_epochs_zero_checkpoint_is_initialization(self, tmp_path, dataset_dir):
        out_a = tmp_path / "zero_a"
        out_b = tmp_path / "zero_b"
        for out in (out_a, out_b):
            assert run(["train", "--data", str(dataset_dir), "--out", str(out),
                        "--epochs", "0", "--seed", "3"]) == EXIT_OK
        assert (out_a / "checkpoint" / "params.bin").read_bytes() == \
               (out_b / "checkpoint" / "params.bin").read_bytes()

    def test_preset_flows_into_echoed_config(self, tmp_path, dataset_dir):
        out = tmp_path / "preset"
        assert run(["train", "--data", str(dataset_dir), "--out", str(out),
                    "--preset", "ntu60", "--epochs", "0"]) == EXIT_OK
        resolved = json.loads((out / "config.json").read_text())["resolved"]["train"]
        assert resolved["batch_size"] == 32
        assert resolved["decay_gamma"] == 0.9985

    def test_flag_overrides_config_file(self, tmp_path, dataset_dir):
        config = tmp_path / "cfg.json"
        config.write_text(json.dumps({
            "paths": {"dataset": str(dataset_dir), "out": str(tmp_path / "from_file")},
            "train": {"epochs": 1, "batch_size": 4, "warmup_steps": 5, "seed": 2},
        }))
        out = tmp_path / "flag_wins"
        assert run(["train", "--config", str(config), "--out", str(out),
                    "--epochs", "0"]) == EXIT_OK
        echoed = json.loads((out / "config.json").read_text())
        assert echoed["resolved"]["train"]["epochs"] == 0
        assert echoed["resolved"]["train"]["batch_size"] == 4

    def test_missing_checkpoint_nonzero(self, tmp_path, dataset_dir):
        assert run(["eval", "--checkpoint", str(tmp_path / "none"),
                    "--data", str(dataset_dir),
                    "--out", str(tmp_path / "out")]) == EXIT_USAGE

    def test_bad_config_file(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        assert run(["train", "--config", str(bad), "--data", "x",
                    "--out", str(tmp_path / "o")]) == EXIT_USAGE


class TestExportAttention:
    def test_export_after_training(self, tmp_path, dataset_dir):
        out = tmp_path / "run"
        assert run(quick_train_args(dataset_dir, out, tmp_path / "cfg.json")) == EXIT_OK
        assert run(["export-attention", "--checkpoint", str(out / "checkpoint"),
                    "--data", str(dataset_dir), "--sample", "0",
                    "--out", str(tmp_path / "attn")]) == EXIT_OK
        records = json.loads((tmp_path / "attn" / "attention.json").read_text())
        for record in records:
            assert abs(sum(record["weights"]) - 1.0) <= 1e-6
        blocks = {r["block"] for r in records}
        assert blocks == {"SJU", "SRU", "TJU", "TRU"}

    def test_missing_inputs(self, tmp_path, dataset_dir):
        assert run(["export-attention", "--data", str(dataset_dir),
                    "--out", str(tmp_path / "attn")]) == EXIT_USAGE
