"""
Integration tests for train, eval, predict, show-config and gen-data.

These tests validate:
- Output layout of a training run
- Evaluation of a reloaded checkpoint
- Single-sample prediction per stage
- Exit codes for config, data and checkpoint errors
"""

from __future__ import annotations

import json

import pytest
import yaml

from tests.cli.conftest import write_config
from tests.cli.utils.assertions import (
    assert_error_logged,
    assert_exit_code,
    assert_files_exist,
    assert_key_value_log,
    assert_probabilities,
    assert_success,
)
from tests.cli.utils.cli_runner import CliRunner, checkpoint_path, metrics_summary


class TestTrainCommand:
    """Single-stage training runs."""

    def test_graph_stream_outputs(self, cli, out_dir):
        result = cli.train("graph_stream", out_dir)
        assert_success(result)
        stage_dir = out_dir / "graph_stream"
        assert_files_exist([stage_dir / "checkpoint.tsck", stage_dir / "metrics.csv", stage_dir / "metrics.json"])
        printed = result.json()
        assert printed["checkpoint"] == str(stage_dir / "checkpoint.tsck")
        assert printed["test_accuracy"] == metrics_summary(out_dir, "graph_stream")["final"]["test_accuracy"]
        assert_key_value_log(result)

    def test_metrics_csv_rows(self, cli, out_dir):
        assert_success(cli.train("image_stream", out_dir))
        lines = (out_dir / "image_stream" / "metrics.csv").read_text().splitlines()
        assert lines[0] == "epoch,split,loss,accuracy"
        assert [line.split(",")[:2] for line in lines[1:]] == [
            ["1", "train"],
            ["1", "test"],
            ["2", "train"],
            ["2", "test"],
        ]

    def test_epoch_flag_overrides_config(self, cli, out_dir):
        assert_success(cli.train("graph_stream", out_dir, epochs=1))
        assert metrics_summary(out_dir, "graph_stream")["epochs"] == 1

    def test_zero_epochs_is_a_config_error(self, cli, out_dir):
        result = cli.train("graph_stream", out_dir, epochs=0)
        assert_exit_code(result, 2)
        assert_error_logged(result, "ConfigError")
        assert not out_dir.exists()

    def test_unknown_config_key(self, capsys, tmp_path, manifest, out_dir):
        config = write_config(tmp_path / "bad.yaml", gnn={"hidden_dims": 8})
        result = CliRunner(capsys, config, manifest).train("graph_stream", out_dir)
        assert_exit_code(result, 2)
        assert "gnn.hidden_dims" in result.stderr

    def test_missing_manifest_is_a_data_error(self, capsys, toy_config, tmp_path, out_dir):
        runner = CliRunner(capsys, toy_config, tmp_path / "nowhere" / "manifest.json")
        assert_exit_code(runner.train("graph_stream", out_dir), 3)

    def test_fusion_without_init_trains_from_scratch(self, cli, out_dir):
        result = cli.train("fusion", out_dir, fusion_mode="sum", epochs=1)
        assert_success(result)
        assert checkpoint_path(out_dir, "fusion").exists()

    def test_init_checkpoint_must_exist(self, cli, out_dir, tmp_path):
        result = cli.train("fusion", out_dir, init=[tmp_path / "absent.tsck"])
        assert_exit_code(result, 4)


class TestEvalCommand:
    """Evaluation of saved checkpoints."""

    def test_reloaded_checkpoint_reproduces_accuracy(self, cli, out_dir):
        trained = cli.train("graph_stream", out_dir).json()
        result = cli.eval(checkpoint_path(out_dir, "graph_stream"))
        assert_success(result)
        row = result.json()
        assert row["accuracy"] == trained["test_accuracy"]
        assert row["loss"] == trained["test_loss"]
        assert row["count"] == 6
        saved = json.loads((out_dir / "graph_stream" / "eval.json").read_text())
        assert saved == [row]

    def test_train_split_and_csv(self, cli, out_dir, tmp_path):
        assert_success(cli.train("image_stream", out_dir, epochs=1))
        ckpt = checkpoint_path(out_dir, "image_stream")
        result = cli.eval(ckpt, "--split", "train", "--format", "csv", "--out", tmp_path / "ev")
        assert_success(result)
        lines = (tmp_path / "ev" / "eval.csv").read_text().splitlines()
        assert lines[0].split(",") == ["stage", "split", "loss", "accuracy", "count"]
        assert lines[1].startswith("image_stream,train,")

    def test_manifest_defaults_to_the_training_one(self, cli, out_dir, capsys):
        assert_success(cli.train("graph_stream", out_dir, epochs=1))
        bare = CliRunner(capsys)
        assert_success(bare.eval(checkpoint_path(out_dir, "graph_stream")))

    def test_truncated_checkpoint_is_a_checkpoint_error(self, cli, out_dir):
        assert_success(cli.train("graph_stream", out_dir, epochs=1))
        path = checkpoint_path(out_dir, "graph_stream")
        path.write_bytes(path.read_bytes()[:-40])
        result = cli.eval(path)
        assert_exit_code(result, 4)
        assert_error_logged(result, "CheckpointError")

    def test_missing_checkpoint(self, cli, tmp_path):
        assert_exit_code(cli.eval(tmp_path / "absent.tsck"), 4)

    def test_verbose_error_includes_traceback(self, cli, tmp_path):
        result = cli.run("-v", "eval", tmp_path / "absent.tsck")
        assert_exit_code(result, 4)
        assert "Traceback" in result.stderr


class TestPredictCommand:
    """Single-sample classification."""

    def test_graph_stream(self, cli, out_dir, sample_files):
        assert_success(cli.train("graph_stream", out_dir, epochs=1))
        result = cli.predict(checkpoint_path(out_dir, "graph_stream"), label_map=sample_files["label_map"])
        assert_success(result)
        document = result.json()
        assert document["stage"] == "graph_stream"
        assert_probabilities(document["probabilities"], 2)
        assert document["predicted"] == max(range(2), key=lambda k: document["logits"][k])

    def test_image_stream(self, cli, out_dir, sample_files):
        assert_success(cli.train("image_stream", out_dir, epochs=1))
        result = cli.predict(checkpoint_path(out_dir, "image_stream"), image=sample_files["image"])
        assert_success(result)
        assert_probabilities(result.json()["probabilities"], 2)

    def test_missing_input_is_a_config_error(self, cli, out_dir, sample_files):
        assert_success(cli.train("image_stream", out_dir, epochs=1))
        result = cli.predict(checkpoint_path(out_dir, "image_stream"), label_map=sample_files["label_map"])
        assert_exit_code(result, 2)
        assert "--image" in result.stderr

    def test_image_of_wrong_size(self, cli, out_dir, tmp_path):
        import numpy as np

        from scene_fusion.rasters import write_image
        from scene_fusion.vision import ImageTensor

        assert_success(cli.train("image_stream", out_dir, epochs=1))
        image = write_image(ImageTensor(np.zeros((16, 16, 3))), tmp_path / "big.png")
        assert_exit_code(cli.predict(checkpoint_path(out_dir, "image_stream"), image=image), 1)


class TestConfigAndDataCommands:
    """show-config and gen-data."""

    def test_show_config_applies_flags(self, cli):
        result = cli.run(
            "show-config", "--config", cli.config, "--stage", "fusion", "--fusion-mode", "product", "--seed", 3
        )
        assert_success(result)
        document = yaml.safe_load(result.stdout)
        assert document["train"]["stage"] == "fusion"
        assert document["fusion"]["mode"] == "product"
        assert (document["seed"], document["data"]["seed"], document["train"]["seed"]) == (3, 3, 3)
        assert document["vit"]["embed_dim"] == 8

    def test_show_config_defaults(self, capsys):
        document = yaml.safe_load(CliRunner(capsys).run("show-config").stdout)
        assert document["gnn"]["hidden_dim"] == 64
        assert document["data"]["num_train"] == 200

    def test_gen_data(self, cli, tmp_path):
        result = cli.run("gen-data", "--config", cli.config, "--out", tmp_path / "d")
        assert_success(result)
        assert result.json() == {"manifest": str(tmp_path / "d" / "manifest.json"), "samples": 18}
        assert (tmp_path / "d" / "labels.csv").exists()

    def test_gen_data_invalid_spec(self, capsys, tmp_path):
        config = write_config(tmp_path / "bad.yaml", data={"label_rule": "joint"})
        result = CliRunner(capsys).run("gen-data", "--config", config, "--out", tmp_path / "d")
        assert_exit_code(result, 2)

    def test_version(self, capsys):
        with pytest.raises(SystemExit) as exc:
            CliRunner(capsys).run("--version")
        assert exc.value.code == 0
        assert "1.0.0" in capsys.readouterr().out
