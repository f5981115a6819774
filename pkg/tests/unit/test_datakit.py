"""Unit tests for the synthetic generator and dataset manifests."""

import json
import os
import tempfile
import unittest
from pathlib import Path
from unittest import mock

import numpy as np

from scene_fusion.datakit import (
    DatasetManifest,
    LabelRule,
    Sample,
    Split,
    SyntheticSpec,
    gen_synthetic,
    has_motif,
    load_dataset,
    manifest_from_folder,
    ordered_map,
    scene_label,
    synthesize,
    synthetic_dataset,
    threads_from_env,
)
from scene_fusion.errors import ConfigError, DataError, ParseError, SampleError
from scene_fusion.rasters import write_image, write_label_map
from scene_fusion.scenegraph import LabelMap, brute_force_adjacency_oracle, build_scene_graph
from scene_fusion.vision import ImageTensor


def small_spec(**overrides) -> SyntheticSpec:
    values = dict(height=16, width=16, min_extent=3, max_extent=8, num_train=8, num_test=4, seed=3)
    values.update(overrides)
    return SyntheticSpec(**values)


class TempDirTestCase(unittest.TestCase):
    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.root = Path(self._tmp.name)

    def tearDown(self):
        self._tmp.cleanup()


class TestSyntheticSpec(unittest.TestCase):
    def test_defaults_are_valid(self):
        SyntheticSpec().validate()

    def test_joint_rule_needs_four_classes(self):
        with self.assertRaises(ConfigError):
            SyntheticSpec(label_rule="joint").validate()
        SyntheticSpec(label_rule="joint", num_scene_classes=4).validate()

    def test_motif_pair_must_be_distinct(self):
        with self.assertRaises(ConfigError):
            SyntheticSpec(motif_pair=(2, 2)).validate()

    def test_motif_pair_in_range(self):
        with self.assertRaises(ConfigError):
            SyntheticSpec(motif_pair=(1, 9)).validate()

    def test_nothing_to_generate(self):
        with self.assertRaises(ConfigError):
            SyntheticSpec(num_train=0, num_test=0).validate()

    def test_hash_tracks_content(self):
        self.assertEqual(small_spec().spec_hash(), small_spec().spec_hash())
        self.assertNotEqual(small_spec().spec_hash(), small_spec(seed=4).spec_hash())
        self.assertTrue(small_spec().spec_hash().startswith("sha256:"))


class TestSceneLabel(unittest.TestCase):
    def test_rules(self):
        self.assertEqual(scene_label(LabelRule.MOTIF, True, False), 1)
        self.assertEqual(scene_label(LabelRule.IMAGE_PATTERN, True, False), 0)
        self.assertEqual(scene_label(LabelRule.XOR, True, True), 0)
        self.assertEqual(scene_label(LabelRule.XOR, False, True), 1)
        self.assertEqual(scene_label(LabelRule.JOINT, True, False), 2)
        self.assertEqual(scene_label(LabelRule.JOINT, True, True), 3)

    def test_motif_detection(self):
        spec = small_spec()
        touching = LabelMap.from_rows([[1, 1, 2], [0, 0, 0]], 6)
        apart = LabelMap.from_rows([[1, 0, 2], [0, 0, 0]], 6)
        self.assertTrue(has_motif(touching, spec))
        self.assertFalse(has_motif(apart, spec))


class TestSynthesize(unittest.TestCase):
    def test_splits_and_ids(self):
        generated = synthesize(small_spec())
        self.assertEqual(len(generated), 12)
        self.assertEqual(sum(g.split is Split.TRAIN for g in generated), 8)
        self.assertEqual(generated[0].sample_id, "s00000")
        self.assertEqual(len({g.sample_id for g in generated}), 12)

    def test_labels_follow_rule(self):
        for rule, k in (("motif", 2), ("image_pattern", 2), ("xor", 2), ("joint", 4)):
            spec = small_spec(label_rule=rule, num_scene_classes=k)
            for g in synthesize(spec):
                self.assertEqual(g.motif, has_motif(g.label_map, spec))
                self.assertEqual(g.label, scene_label(spec.label_rule, g.motif, g.bright), rule)

    def test_motif_labels_agree_with_flood_fill_oracle(self):
        spec = small_spec(num_train=12, num_test=0)
        for g in synthesize(spec):
            graph = build_scene_graph(g.label_map, spec.extraction_options)
            classes = [node.class_id for node in graph.nodes]
            pairs = {
                tuple(sorted((classes[a], classes[b])))
                for a, b in brute_force_adjacency_oracle(g.label_map, spec.extraction_options)
            }
            self.assertEqual(g.label, int(tuple(sorted(spec.motif_pair)) in pairs), g.sample_id)

    def test_full_canvas_rectangle_is_a_single_node(self):
        spec = small_spec(
            min_objects=1,
            max_objects=1,
            min_extent=16,
            max_extent=16,
            shape_kinds=("rectangle",),
            label_rule="image_pattern",
        )
        for g in synthesize(spec):
            graph = build_scene_graph(g.label_map, spec.extraction_options)
            self.assertEqual((graph.num_nodes, len(graph.edges)), (1, 0))

    def test_splits_are_disjoint(self):
        dataset = synthetic_dataset(small_spec())
        self.assertFalse({s.sample_id for s in dataset.train} & {s.sample_id for s in dataset.test})

    def test_balanced_labels(self):
        generated = synthesize(small_spec(label_rule="xor"))
        counts = np.bincount([g.label for g in generated if g.split is Split.TRAIN], minlength=2)
        self.assertEqual(counts.tolist(), [4, 4])

    def test_same_seed_same_data_any_thread_count(self):
        a = synthesize(small_spec(), threads=1)
        b = synthesize(small_spec(), threads=3)
        for x, y in zip(a, b):
            self.assertEqual(x.label, y.label)
            np.testing.assert_array_equal(x.label_map.pixels, y.label_map.pixels)
            self.assertEqual(x.image, y.image)

    def test_images_on_8bit_grid(self):
        for g in synthesize(small_spec(num_train=3, num_test=0)):
            scaled = g.image.pixels * 255.0
            np.testing.assert_allclose(scaled, np.rint(scaled), atol=1e-9)

    def test_bright_images_are_brighter(self):
        generated = synthesize(small_spec(label_rule="image_pattern", noise=0.02, palette_contrast=0.0))
        bright = [g.image.pixels.mean() for g in generated if g.bright]
        dark = [g.image.pixels.mean() for g in generated if not g.bright]
        self.assertGreater(min(bright), max(dark))

    def test_shapes_and_channels(self):
        g = synthesize(small_spec(channels=1, num_train=1, num_test=0))[0]
        self.assertEqual((g.image.height, g.image.width, g.image.channels), (16, 16, 1))
        self.assertEqual(g.label_map.num_classes, 6)

    def test_unreachable_label_fails_loudly(self):
        spec = small_spec(motif_pair=(1, 2), num_object_classes=3, background_class=0, min_objects=1,
                          max_objects=1, max_attempts=3, num_train=2, num_test=0)
        with self.assertRaises(SampleError):
            synthesize(spec)


class TestSyntheticDataset(unittest.TestCase):
    def test_in_memory_dataset(self):
        dataset = synthetic_dataset(small_spec())
        self.assertEqual((len(dataset.train), len(dataset.test)), (8, 4))
        self.assertEqual(dataset.image_shape, (16, 16, 3))
        self.assertEqual(dataset.num_classes, 6)
        self.assertTrue(dataset.provenance.startswith("sha256:"))
        self.assertEqual(sum(dataset.label_counts("train").values()), 8)

    def test_graphs_are_cached_per_options(self):
        sample = synthetic_dataset(small_spec(num_train=1, num_test=0)).samples[0]
        self.assertIs(sample.graph(), sample.graph())


class TestManifestFiles(TempDirTestCase):
    def test_generate_then_load(self):
        spec = small_spec()
        manifest = gen_synthetic(spec, self.root)
        self.assertEqual(len(manifest.entries), 12)
        self.assertTrue((self.root / "labels.csv").read_text().startswith("sample_id,label\n"))
        loaded = load_dataset(self.root / "manifest.json")
        memory = synthetic_dataset(spec)
        self.assertEqual(loaded.provenance, spec.spec_hash())
        for disk, mem in zip(loaded.samples, memory.samples):
            self.assertEqual((disk.sample_id, disk.label, disk.split), (mem.sample_id, mem.label, mem.split))
            np.testing.assert_array_equal(disk.label_map.pixels, mem.label_map.pixels)
            self.assertEqual(disk.image, mem.image)

    def test_generation_is_byte_identical(self):
        gen_synthetic(small_spec(num_train=2, num_test=1), self.root / "a")
        gen_synthetic(small_spec(num_train=2, num_test=1), self.root / "b")
        for name in ("manifest.json", "labels.csv", "maps/s00001.png", "images/s00002.png"):
            self.assertEqual((self.root / "a" / name).read_bytes(), (self.root / "b" / name).read_bytes(), name)

    def test_missing_raster_is_a_sample_error(self):
        gen_synthetic(small_spec(num_train=2, num_test=1), self.root)
        (self.root / "images" / "s00001.png").unlink()
        with self.assertRaises(SampleError) as ctx:
            load_dataset(self.root / "manifest.json")
        self.assertEqual(ctx.exception.sample_id, "s00001")

    def test_validated_load_keeps_rasters_on_disk(self):
        gen_synthetic(small_spec(num_train=6, num_test=2), self.root)
        dataset = load_dataset(self.root / "manifest.json")
        self.assertEqual(len(dataset), 8)
        self.assertEqual([s.sample_id for s in dataset.samples if s.resident], [])
        sample = dataset.samples[0]
        _ = sample.label_map
        self.assertTrue(sample.resident)
        self.assertEqual(sum(s.resident for s in dataset.samples), 1)

    def test_lazy_load_skips_validation(self):
        gen_synthetic(small_spec(num_train=2, num_test=1), self.root)
        (self.root / "images" / "s00001.png").unlink()
        dataset = load_dataset(self.root / "manifest.json", validate=False)
        with self.assertRaises(SampleError):
            _ = dataset.by_id("s00001").image

    def test_size_mismatch_is_rejected(self):
        gen_synthetic(small_spec(num_train=2, num_test=1), self.root)
        write_image(ImageTensor(np.zeros((8, 8, 3))), self.root / "images" / "s00000.png")
        with self.assertRaises(SampleError):
            load_dataset(self.root / "manifest.json")

    def test_missing_manifest(self):
        with self.assertRaises(DataError):
            load_dataset(self.root / "manifest.json")


class TestManifestParsing(unittest.TestCase):
    def document(self, **overrides):
        doc = {
            "format": "scene-fusion-manifest",
            "version": 1,
            "num_classes": 3,
            "num_scene_classes": 2,
            "samples": [{"id": "a", "label_map": "a.png", "image": "a.jpg", "label": 1, "split": "train"}],
        }
        doc.update(overrides)
        return json.dumps(doc)

    def test_valid_document(self):
        manifest = DatasetManifest.from_json(self.document())
        self.assertEqual(manifest.entries[0].split, Split.TRAIN)
        self.assertEqual(manifest.provenance, "external")

    def test_malformed_json_reports_position(self):
        with self.assertRaises(ParseError) as ctx:
            DatasetManifest.from_json("{\n  \"format\": ")
        self.assertIn("line", ctx.exception.context)

    def test_wrong_format(self):
        with self.assertRaises(ParseError):
            DatasetManifest.from_json(self.document(format="other"))

    def test_duplicate_ids(self):
        entry = {"id": "a", "label_map": "a.png", "image": "a.jpg", "label": 0, "split": "test"}
        with self.assertRaises(ParseError) as ctx:
            DatasetManifest.from_json(self.document(samples=[entry, entry]))
        self.assertEqual(ctx.exception.context, "samples[1]")

    def test_bad_split(self):
        entry = {"id": "a", "label_map": "a.png", "image": "a.jpg", "label": 0, "split": "valid"}
        with self.assertRaises(ParseError):
            DatasetManifest.from_json(self.document(samples=[entry]))

    def test_missing_field(self):
        with self.assertRaises(ParseError):
            DatasetManifest.from_json(self.document(samples=[{"id": "a"}]))


class TestFolderIngestion(TempDirTestCase):
    def test_builds_manifest_from_annotations(self):
        for i, label in enumerate((0, 1)):
            write_label_map(LabelMap.from_rows([[0, i + 1], [2, 2]], 4), self.root / "annotations" / f"x{i}.png")
            write_image(ImageTensor(np.full((2, 2, 3), 0.5)), self.root / "images" / f"x{i}.png")
        (self.root / "scene_labels.csv").write_text("sample_id,label,split\nx0,0,train\nx1,1,test\n")
        manifest = manifest_from_folder(self.root)
        self.assertEqual(manifest.num_classes, 3)
        self.assertEqual([e.split for e in manifest.entries], [Split.TRAIN, Split.TEST])
        dataset = load_dataset(self.root / "manifest.json")
        self.assertEqual(dataset.by_id("x1").label, 1)

    def test_missing_image(self):
        write_label_map(LabelMap.from_rows([[0]], 1), self.root / "annotations" / "x0.png")
        (self.root / "scene_labels.csv").write_text("sample_id,label\nx0,0\n")
        with self.assertRaises(SampleError):
            manifest_from_folder(self.root)

    def test_bad_label_column(self):
        (self.root / "scene_labels.csv").write_text("sample_id,label\nx0,zero\n")
        with self.assertRaises(ParseError):
            manifest_from_folder(self.root)


class TestSample(unittest.TestCase):
    def test_label_out_of_range(self):
        sample = Sample.in_memory("z", 5, Split.TEST, LabelMap.from_rows([[0]]), ImageTensor(np.zeros((1, 1))))
        with self.assertRaises(SampleError):
            sample.validate(2)


class TestThreads(unittest.TestCase):
    def test_default_is_one(self):
        with mock.patch.dict(os.environ, {}, clear=True):
            self.assertEqual(threads_from_env(), 1)

    def test_invalid_value(self):
        with mock.patch.dict(os.environ, {"TSG_THREADS": "many"}):
            with self.assertRaises(ConfigError):
                threads_from_env()

    def test_ordered_map_keeps_order(self):
        self.assertEqual(ordered_map(lambda x: x * x, list(range(20)), threads=4), [x * x for x in range(20)])


if __name__ == "__main__":
    unittest.main()
