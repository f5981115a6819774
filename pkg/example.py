"""
Scene Fusion - Example Usage and Demo

This script walks through both streams and the fusion model on a tiny
synthetic dataset.

Usage:
    python example.py
"""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent / "src"))

from scene_fusion import (
    ExtractionOptions,
    FusionConfig,
    FusionMode,
    GnnConfig,
    LabelMap,
    LayerKind,
    NodeMode,
    VitConfig,
    build_scene_graph,
)
from scene_fusion.datakit import SyntheticSpec, synthetic_dataset
from scene_fusion.fusion import FusionModel, vote_fuse
from scene_fusion.gnn import GnnModel, gnn_classify
from scene_fusion.scenegraph import brute_force_adjacency_oracle
from scene_fusion.training import SceneModels, Stage, TrainConfig, train
from scene_fusion.vision import VitModel, patchify


def demo_scene_graph():
    """Demonstrate scene graph extraction."""
    print("=" * 60)
    print("DEMO: Scene Graph Extraction")
    print("=" * 60)

    label_map = LabelMap.from_rows(
        [
            [0, 0, 1, 1],
            [0, 2, 2, 1],
            [3, 3, 2, 0],
        ],
        num_classes=4,
    )
    for mode in NodeMode:
        graph = build_scene_graph(label_map, ExtractionOptions(node_mode=mode))
        print(f"\n{mode.value} nodes: {graph.num_nodes}, edges: {graph.sorted_edges()}")
        print(f"  class pairs: {dict(graph.class_pairs())}")

    graph = build_scene_graph(label_map)
    oracle = brute_force_adjacency_oracle(label_map)
    print(f"\nFast path agrees with the flood-fill oracle: {graph.edges == oracle}")


def demo_graph_layers():
    """Run each graph layer kind on the same graph."""
    print("\n" + "=" * 60)
    print("DEMO: Graph Layers")
    print("=" * 60)

    graph = build_scene_graph(LabelMap.from_rows([[0, 1, 1], [2, 2, 1]], num_classes=3))
    for kind in LayerKind:
        model = GnnModel(GnnConfig(layer_kind=kind, in_dim=3, hidden_dim=8), seed=0)
        logits = gnn_classify(graph, model)
        print(f"  {kind.value:5s} logits: {[round(v, 4) for v in logits.data[0].tolist()]}")


def demo_patches():
    """Show how an image becomes patch rows."""
    print("\n" + "=" * 60)
    print("DEMO: Patchify")
    print("=" * 60)

    dataset = synthetic_dataset(SyntheticSpec(height=16, width=16, num_train=2, num_test=0, seed=3))
    image = dataset.samples[0].image
    patches = patchify(image, 4)
    print(f"\n  image {image.height}x{image.width}x{image.channels} -> patches {patches.rows}x{patches.cols}")


def demo_voting():
    """Soft and hard voting between two streams."""
    print("\n" + "=" * 60)
    print("DEMO: Voting")
    print("=" * 60)

    graph_logits = [[2.0, 0.0]]
    image_logits = [[0.0, 3.0]]
    soft = vote_fuse(graph_logits, image_logits, "soft")
    hard = vote_fuse(graph_logits, image_logits, "hard")
    print(f"\n  soft vote: class {soft.classes[0]}, distribution {soft.distribution[0].round(4).tolist()}")
    print(f"  hard vote: class {hard.classes[0]}")


def demo_training():
    """Train both streams, then a fusion head over frozen backbones."""
    print("\n" + "=" * 60)
    print("DEMO: Staged Training")
    print("=" * 60)

    spec = SyntheticSpec(height=16, width=16, num_train=24, num_test=8, seed=7)
    dataset = synthetic_dataset(spec)
    k = dataset.num_scene_classes
    gnn = GnnModel(GnnConfig(in_dim=dataset.num_classes, hidden_dim=16, num_scene_classes=k), seed=1)
    vit = VitModel(
        VitConfig(patch_size=4, embed_dim=16, depth=1, num_heads=2, image_size=16, num_scene_classes=k),
        seed=2,
    )
    models = SceneModels(gnn=gnn, vit=vit)

    for stage in (Stage.GRAPH_STREAM, Stage.IMAGE_STREAM):
        result = train(models, dataset, TrainConfig(stage=stage, epochs=3, batch_size=8, learning_rate=1e-2))
        last = result.metrics.last
        print(f"\n  {stage.value}: train_acc={last.train_accuracy:.3f} test_acc={last.test_accuracy:.3f}")

    fusion = FusionModel(FusionConfig(FusionMode.CROSS_ATTENTION, g_dim=16, v_dim=16, f_dim=16, num_scene_classes=k))
    fused = SceneModels(gnn=gnn, vit=vit, fusion=fusion)
    result = train(fused, dataset, TrainConfig(stage=Stage.FUSION, epochs=3, batch_size=8, learning_rate=1e-2))
    last = result.metrics.last
    print(f"  fusion: train_acc={last.train_accuracy:.3f} test_acc={last.test_accuracy:.3f}")


def main():
    """Run all demos."""
    print("\n" + "=" * 60)
    print("SCENE FUSION - DEMO")
    print("=" * 60)

    demo_scene_graph()
    demo_graph_layers()
    demo_patches()
    demo_voting()
    demo_training()

    print("\n" + "=" * 60)
    print("All demos completed!")
    print("=" * 60)


if __name__ == "__main__":
    main()
