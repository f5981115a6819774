"""Unit tests for staged training, evaluation and metrics."""

import json
import math
import tempfile
import unittest
from pathlib import Path

import numpy as np

from scene_fusion.config import RunConfig, build_models, resolve_model_configs
from scene_fusion.datakit import Dataset, SyntheticSpec, synthetic_dataset
from scene_fusion.errors import ConfigError, DataError
from scene_fusion.training import (
    FeatureCache,
    Metrics,
    SceneModels,
    Stage,
    TrainConfig,
    evaluate,
    forward_batch,
    train,
)

TOY = {
    "gnn": {"hidden_dim": 8},
    "vit": {"patch_size": 4, "embed_dim": 8, "depth": 1, "num_heads": 2, "mlp_ratio": 2},
    "fusion": {"f_dim": 8},
}


def toy_dataset(**overrides) -> Dataset:
    values = dict(height=8, width=8, min_extent=2, max_extent=5, num_train=8, num_test=4, seed=1)
    values.update(overrides)
    return synthetic_dataset(SyntheticSpec(**values))


def toy_models(dataset: Dataset, stage: Stage, seed: int = 0, **sections) -> SceneModels:
    config = RunConfig.from_dict({**TOY, **sections})
    configs = resolve_model_configs(config, dataset.num_classes, dataset.num_scene_classes, dataset.image_shape)
    return build_models(configs, stage, seed)


def snapshot(models: SceneModels, prefix: str):
    return {n: models.params.value(n).data.copy() for n in models.params.names() if n.startswith(prefix)}


class TestTrainConfig(unittest.TestCase):
    def test_epochs_must_be_positive(self):
        with self.assertRaises(ConfigError):
            TrainConfig(epochs=0).validate()

    def test_zero_learning_rate_is_allowed(self):
        TrainConfig(learning_rate=0.0).validate()

    def test_negative_learning_rate(self):
        with self.assertRaises(ConfigError):
            TrainConfig(learning_rate=-1e-3).validate()

    def test_unknown_stage(self):
        with self.assertRaises(ConfigError):
            TrainConfig(stage="warmup")


class TestSceneModels(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.dataset = toy_dataset()

    def test_fusion_stage_needs_all_models(self):
        models = toy_models(self.dataset, Stage.GRAPH_STREAM)
        with self.assertRaises(ConfigError):
            models.require(Stage.FUSION)

    def test_empty_bundle(self):
        with self.assertRaises(ConfigError):
            _ = SceneModels().params

    def test_missing_model_is_a_config_error(self):
        models = toy_models(self.dataset, Stage.GRAPH_STREAM)
        self.assertIs(models.graph_model(), models.gnn)
        with self.assertRaises(ConfigError):
            models.image_model()
        with self.assertRaises(ConfigError):
            models.fusion_model()
        with self.assertRaises(ConfigError):
            forward_batch(models, self.dataset.train[:2], Stage.IMAGE_STREAM, self.dataset.options)

    def test_trainable_views(self):
        models = toy_models(self.dataset, Stage.FUSION)
        frozen = models.trainable(TrainConfig(stage="fusion"))
        self.assertTrue(all(n.startswith("fuse.") for n in frozen.names()))
        unfrozen = models.trainable(TrainConfig(stage="fusion", freeze_graph=False))
        self.assertTrue(any(n.startswith("gnn.") for n in unfrozen.names()))
        self.assertFalse(any(n.startswith("vit.") for n in unfrozen.names()))
        self.assertEqual(len(models.trainable(TrainConfig(stage="end_to_end"))), len(models.params))

    def test_forward_batch_shapes(self):
        models = toy_models(self.dataset, Stage.FUSION)
        batch = self.dataset.train[:3]
        for stage in Stage:
            out = forward_batch(models, batch, stage, self.dataset.options)
            self.assertEqual(out.logits.shape, (3, 2), stage.value)


class TestEvaluate(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.dataset = toy_dataset()

    def test_result_fields(self):
        models = toy_models(self.dataset, Stage.GRAPH_STREAM)
        result = evaluate(models, self.dataset.test, "graph_stream", self.dataset.options)
        self.assertEqual(result.count, 4)
        self.assertEqual(len(result.predictions), 4)
        self.assertTrue(0.0 <= result.accuracy <= 1.0)
        self.assertTrue(math.isfinite(result.loss))
        self.assertEqual(set(result.to_dict()), {"loss", "accuracy", "count"})

    def test_batching_does_not_change_result(self):
        models = toy_models(self.dataset, Stage.IMAGE_STREAM)
        a = evaluate(models, self.dataset.train, Stage.IMAGE_STREAM, batch_size=3)
        b = evaluate(models, self.dataset.train, Stage.IMAGE_STREAM, batch_size=64)
        self.assertEqual(a.predictions, b.predictions)
        self.assertAlmostEqual(a.loss, b.loss, places=5)

    def test_cache_gives_same_fusion_result(self):
        models = toy_models(self.dataset, Stage.FUSION)
        cache = FeatureCache()
        plain = evaluate(models, self.dataset.test, Stage.FUSION, self.dataset.options)
        cached = evaluate(models, self.dataset.test, Stage.FUSION, self.dataset.options, cache=cache)
        self.assertEqual(len(cache), 4)
        self.assertEqual(plain.predictions, cached.predictions)
        self.assertAlmostEqual(plain.loss, cached.loss, places=5)

    def test_constant_predictor_on_balanced_split(self):
        models = toy_models(self.dataset, Stage.GRAPH_STREAM)
        for name in ("gnn.head.W", "gnn.head.b"):
            models.params.set_value(name, np.zeros(models.params.value(name).shape))
        result = evaluate(models, self.dataset.test, Stage.GRAPH_STREAM, self.dataset.options)
        self.assertEqual(result.predictions, [0, 0, 0, 0])
        self.assertEqual(result.accuracy, 0.5)
        self.assertAlmostEqual(result.loss, math.log(2.0), places=6)

    def test_empty_sample_set(self):
        models = toy_models(self.dataset, Stage.GRAPH_STREAM)
        with self.assertRaises(DataError):
            evaluate(models, [], Stage.GRAPH_STREAM)


class TestTrain(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.dataset = toy_dataset()

    def test_records_one_row_per_epoch(self):
        models = toy_models(self.dataset, Stage.GRAPH_STREAM)
        result = train(models, self.dataset, TrainConfig(stage="graph_stream", epochs=3, batch_size=4))
        self.assertEqual([m.epoch for m in result.metrics.epochs], [1, 2, 3])
        self.assertIsNotNone(result.metrics.last.test_accuracy)
        self.assertIs(result.params, models.params)

    def test_zero_learning_rate_keeps_parameters(self):
        models = toy_models(self.dataset, Stage.IMAGE_STREAM)
        before = snapshot(models, "vit.")
        train(models, self.dataset, TrainConfig(stage="image_stream", epochs=1, learning_rate=0.0, optimizer="sgd"))
        for name, value in before.items():
            np.testing.assert_array_equal(models.params.value(name).data, value)

    def test_graph_stage_moves_only_graph_parameters(self):
        models = toy_models(self.dataset, Stage.FUSION)
        vit_before = snapshot(models, "vit.")
        gnn_before = snapshot(models, "gnn.")
        train(models, self.dataset, TrainConfig(stage="graph_stream", epochs=1, learning_rate=0.01))
        for name, value in vit_before.items():
            np.testing.assert_array_equal(models.params.value(name).data, value)
        self.assertTrue(any(not np.array_equal(models.params.value(n).data, v) for n, v in gnn_before.items()))

    def test_frozen_fusion_keeps_backbones(self):
        models = toy_models(self.dataset, Stage.FUSION)
        backbones = {**snapshot(models, "gnn."), **snapshot(models, "vit.")}
        fuse_before = snapshot(models, "fuse.")
        train(models, self.dataset, TrainConfig(stage="fusion", epochs=2, learning_rate=0.01))
        for name, value in backbones.items():
            np.testing.assert_array_equal(models.params.value(name).data, value)
        self.assertTrue(any(not np.array_equal(models.params.value(n).data, v) for n, v in fuse_before.items()))

    def test_end_to_end_moves_everything(self):
        models = toy_models(self.dataset, Stage.END_TO_END, fusion={"f_dim": 8, "mode": "sum"})
        before = snapshot(models, "")
        train(models, self.dataset, TrainConfig(stage="end_to_end", epochs=1, learning_rate=0.01))
        for prefix in ("gnn.", "vit.", "fuse."):
            moved = [
                not np.array_equal(models.params.value(n).data, v) for n, v in before.items() if n.startswith(prefix)
            ]
            self.assertTrue(any(moved), prefix)

    def test_contrastive_term_runs(self):
        models = toy_models(
            self.dataset, Stage.FUSION, fusion={"f_dim": 8, "mode": "concat"}, train={"contrastive_weight": 0.5}
        )
        self.assertIn("fuse.proj_g.W", models.params)
        result = train(
            models, self.dataset, TrainConfig(stage="fusion", epochs=1, contrastive_weight=0.5, batch_size=4)
        )
        self.assertTrue(math.isfinite(result.metrics.last.train_loss))

    def test_vote_fusion_has_nothing_to_train(self):
        models = toy_models(self.dataset, Stage.FUSION, fusion={"f_dim": 8, "mode": "vote_soft"})
        with self.assertLogs("scene_fusion.training", level="WARNING"):
            result = train(models, self.dataset, TrainConfig(stage="fusion", epochs=1))
        self.assertEqual(len(result.metrics.epochs), 1)

    def test_same_seed_same_history(self):
        histories = []
        for _ in range(2):
            models = toy_models(self.dataset, Stage.GRAPH_STREAM, seed=4)
            result = train(models, self.dataset, TrainConfig(stage="graph_stream", epochs=2, batch_size=3, seed=4))
            histories.append(result.metrics.to_csv())
        self.assertEqual(histories[0], histories[1])

    def test_loss_goes_down_on_training_split(self):
        models = toy_models(self.dataset, Stage.GRAPH_STREAM)
        result = train(
            models, self.dataset, TrainConfig(stage="graph_stream", epochs=30, batch_size=8, learning_rate=0.02)
        )
        self.assertLess(result.metrics.last.train_loss, result.metrics.epochs[0].train_loss)

    def test_empty_training_split(self):
        dataset = toy_dataset(num_train=0, num_test=2)
        models = toy_models(dataset, Stage.GRAPH_STREAM)
        with self.assertRaises(DataError):
            train(models, dataset, TrainConfig(stage="graph_stream", epochs=1))


class TestMetrics(unittest.TestCase):
    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.root = Path(self._tmp.name)

    def tearDown(self):
        self._tmp.cleanup()

    def test_files(self):
        dataset = toy_dataset()
        models = toy_models(dataset, Stage.GRAPH_STREAM)
        metrics = train(models, dataset, TrainConfig(stage="graph_stream", epochs=2)).metrics
        csv_path, json_path = metrics.write(self.root)
        lines = csv_path.read_text().splitlines()
        self.assertEqual(lines[0], "epoch,split,loss,accuracy")
        self.assertEqual(len(lines), 1 + 2 * 2)
        summary = json.loads(json_path.read_text())
        self.assertEqual(summary["epochs"], 2)
        self.assertNotIn("seconds", summary)
        self.assertEqual(summary["final"]["test_accuracy"], metrics.last.test_accuracy)

    def test_final_row_matches_summary(self):
        dataset = toy_dataset()
        models = toy_models(dataset, Stage.GRAPH_STREAM)
        metrics = train(models, dataset, TrainConfig(stage="graph_stream", epochs=1)).metrics
        self.assertEqual(metrics.summary()["final"], metrics.final())
        self.assertEqual(metrics.final()["train_loss"], metrics.last.train_loss)

    def test_no_epochs(self):
        with self.assertRaises(DataError):
            _ = Metrics(Stage.FUSION).last


if __name__ == "__main__":
    unittest.main()
