"""
Scene Fusion - Two-stream scene understanding on a self-contained numeric core.

Semantic label maps become scene graphs (regions as one-hot nodes, pixel
contacts as edges); a graph network embeds them, a small patch transformer
embeds the paired images, and a fusion model combines both streams to predict
a scene label. Gradients come from the reverse-mode engine in `autodiff`.
"""

from scene_fusion.errors import (
    CheckpointError,
    ConfigError,
    DataError,
    NumericError,
    SceneFusionError,
)
from scene_fusion.fusion import FusionConfig, FusionMode, FusionModel, fused_classify
from scene_fusion.gnn import GnnConfig, GnnModel, LayerKind, Readout, gnn_classify
from scene_fusion.params import ParamStore
from scene_fusion.scenegraph import (
    ExtractionOptions,
    LabelMap,
    NodeMode,
    SceneGraph,
    build_scene_graph,
)
from scene_fusion.tensor import Precision, Tensor2D
from scene_fusion.vision import ImageTensor, VitConfig, VitModel, vit_classify

__version__ = "1.0.0"

__all__ = [
    "CheckpointError",
    "ConfigError",
    "DataError",
    "ExtractionOptions",
    "FusionConfig",
    "FusionMode",
    "FusionModel",
    "GnnConfig",
    "GnnModel",
    "ImageTensor",
    "LabelMap",
    "LayerKind",
    "NodeMode",
    "NumericError",
    "ParamStore",
    "Precision",
    "Readout",
    "SceneFusionError",
    "SceneGraph",
    "Tensor2D",
    "VitConfig",
    "VitModel",
    "__version__",
    "build_scene_graph",
    "fused_classify",
    "gnn_classify",
    "vit_classify",
]
