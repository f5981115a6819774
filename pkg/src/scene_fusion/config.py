"""
Scene Fusion - Run configuration.

A RunConfig gathers every tunable of a run in one YAML document:

    seed: 0                  # root seed: data, model init and shuffling
    data: {...}              # SyntheticSpec
    extraction: {...}        # ExtractionOptions
    gnn: {...}               # GnnConfig
    vit: {...}               # VitConfig
    fusion: {...}            # FusionConfig
    train: {...}             # TrainConfig
    paths: {data_dir, out_dir, manifest}

Unknown keys are rejected with their dotted path. Widths that depend on the
data (gnn.in_dim, vit.image_size, vit.channels, every num_scene_classes,
fusion.g_dim and fusion.v_dim) are filled in from the dataset when models are
built.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Type, TypeVar, Union

import numpy as np
import yaml

from scene_fusion.checkpoint import Checkpoint
from scene_fusion.datakit import SyntheticSpec
from scene_fusion.errors import CheckpointError, ConfigError, ContractError
from scene_fusion.fusion import FusionConfig, FusionMode, FusionModel
from scene_fusion.gnn import GnnConfig, GnnModel
from scene_fusion.scenegraph import ExtractionOptions
from scene_fusion.tensor import Precision
from scene_fusion.training import SceneModels, Stage, TrainConfig
from scene_fusion.vision import VitConfig, VitModel

logger = logging.getLogger(__name__)

C = TypeVar("C")
PathLike = Union[str, Path]


@dataclass
class PathsConfig:
    data_dir: str = "data"
    out_dir: str = "runs"
    manifest: Optional[str] = None

    def manifest_path(self) -> Path:
        return Path(self.manifest) if self.manifest else Path(self.data_dir) / "manifest.json"


@dataclass
class RunConfig:
    seed: int = 0
    data: SyntheticSpec = field(default_factory=SyntheticSpec)
    extraction: ExtractionOptions = field(default_factory=ExtractionOptions)
    gnn: GnnConfig = field(default_factory=GnnConfig)
    vit: VitConfig = field(default_factory=VitConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def __post_init__(self) -> None:
        self.apply_seed(self.seed)

    def apply_seed(self, seed: int) -> None:
        self.seed = int(seed)
        self.data.seed = self.seed
        self.train.seed = self.seed

    def validate(self) -> None:
        self.data.validate()
        self.extraction.validate()
        self.gnn.validate()
        self.vit.validate()
        self.fusion.validate()
        self.train.validate()

    @classmethod
    def from_dict(cls, document: Mapping[str, Any]) -> RunConfig:
        return _build(cls, document, "")

    def to_dict(self) -> Dict[str, Any]:
        return _plain(self)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True, default_flow_style=False)


# =============================================================================
# Dict <-> dataclass
# =============================================================================


def _build(cls: Type[C], document: Any, path: str) -> C:
    where = path or "<root>"
    if document is None:
        document = {}
    if not isinstance(document, Mapping):
        raise ConfigError(f"{where}: expected a mapping, got {type(document).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls) if not f.name.startswith("_")}  # type: ignore[arg-type]
    unknown = sorted(set(document) - set(fields))
    if unknown:
        dotted = ", ".join(f"{path}.{k}" if path else str(k) for k in unknown)
        raise ConfigError(f"unknown config keys: {dotted}")
    kwargs: Dict[str, Any] = {}
    defaults = cls()  # type: ignore[call-arg]
    for name, value in document.items():
        current = getattr(defaults, name)
        dotted = f"{path}.{name}" if path else name
        if dataclasses.is_dataclass(current):
            kwargs[name] = _build(type(current), value, dotted)
        elif isinstance(current, tuple) and isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _plain(value: Any) -> Any:
    if dataclasses.is_dataclass(value) and not isinstance(value, type):
        return {
            f.name: _plain(getattr(value, f.name))
            for f in dataclasses.fields(value)
            if not f.name.startswith("_")
        }
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, Path):
        return str(value)
    return value


def load_run_config(path: Optional[PathLike] = None) -> RunConfig:
    """Defaults, overlaid with the YAML document at `path` if given."""
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        document = yaml.safe_load(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    config = RunConfig.from_dict(document or {})
    logger.debug("loaded run config from %s", path)
    return config


def apply_overrides(
    config: RunConfig,
    seed: Optional[int] = None,
    stage: Optional[str] = None,
    fusion_mode: Optional[str] = None,
    out_dir: Optional[str] = None,
    epochs: Optional[int] = None,
    manifest: Optional[str] = None,
) -> RunConfig:
    """Command-line flags win over file values."""
    try:
        if seed is not None:
            config.apply_seed(seed)
        if stage is not None:
            config.train.stage = Stage(stage)
        if fusion_mode is not None:
            config.fusion.mode = FusionMode(fusion_mode)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if out_dir is not None:
        config.paths.out_dir = out_dir
    if epochs is not None:
        config.train.epochs = epochs
    if manifest is not None:
        config.paths.manifest = manifest
    return config


# =============================================================================
# Model assembly
# =============================================================================


@dataclass
class ModelConfigs:
    gnn: GnnConfig
    vit: VitConfig
    fusion: FusionConfig

    def to_dict(self) -> Dict[str, Any]:
        return _plain(self)

    @classmethod
    def from_dict(cls, document: Mapping[str, Any]) -> ModelConfigs:
        try:
            return cls(
                _build(GnnConfig, document["gnn"], "models.gnn"),
                _build(VitConfig, document["vit"], "models.vit"),
                _build(FusionConfig, document["fusion"], "models.fusion"),
            )
        except KeyError as exc:
            raise CheckpointError(f"checkpoint config lacks models.{exc.args[0]}") from exc
        except ConfigError as exc:
            raise CheckpointError(f"checkpoint config invalid: {exc}") from exc


def resolve_model_configs(
    config: RunConfig,
    num_classes: int,
    num_scene_classes: int,
    image_shape: Tuple[int, int, int],
) -> ModelConfigs:
    """Fill the data-dependent widths of the three model configs."""
    height, width, channels = image_shape
    if height != width:
        raise ConfigError(f"images must be square, got {height}x{width}")
    gnn = dataclasses.replace(config.gnn, in_dim=num_classes, num_scene_classes=num_scene_classes)
    vit = dataclasses.replace(
        config.vit, image_size=height, channels=channels, num_scene_classes=num_scene_classes
    )
    fusion = dataclasses.replace(
        config.fusion,
        g_dim=gnn.hidden_dim,
        v_dim=vit.embed_dim,
        num_scene_classes=num_scene_classes,
        with_projections=config.fusion.with_projections or config.train.contrastive_weight > 0,
    )
    for part in (gnn, vit, fusion):
        part.validate()
    return ModelConfigs(gnn, vit, fusion)


def build_models(
    configs: ModelConfigs,
    stage: Stage,
    seed: int = 0,
    init: Optional[Checkpoint] = None,
    precision: Precision = Precision.DEFAULT,
) -> SceneModels:
    """Fresh models for a stage; namespaces present in `init` are loaded instead."""
    gnn_seed, vit_seed, fuse_seed = (
        int(c.generate_state(1)[0]) for c in np.random.SeedSequence(seed).spawn(3)
    )
    wanted = {
        Stage.GRAPH_STREAM: ("gnn",),
        Stage.IMAGE_STREAM: ("vit",),
        Stage.FUSION: ("gnn", "vit", "fusion"),
        Stage.END_TO_END: ("gnn", "vit", "fusion"),
    }[stage]
    models = SceneModels()

    def params_for(prefix: str) -> Any:
        if init is None or not any(n.startswith(prefix) for n in init.tensors):
            return None
        return init.to_store(prefix, precision)

    try:
        if "gnn" in wanted:
            models.gnn = GnnModel(configs.gnn, params_for(GnnModel.PREFIX), gnn_seed, precision)
        if "vit" in wanted:
            models.vit = VitModel(configs.vit, params_for(VitModel.PREFIX), vit_seed, precision)
        if "fusion" in wanted:
            models.fusion = FusionModel(configs.fusion, params_for(FusionModel.PREFIX), fuse_seed, precision)
    except ContractError as exc:
        raise CheckpointError(f"initial checkpoint does not fit the model: {exc}") from exc
    return models


def models_from_checkpoint(checkpoint: Checkpoint, stage: Optional[Stage] = None) -> SceneModels:
    """Rebuild the models a checkpoint was trained as."""
    try:
        stage = stage or Stage(checkpoint.config["stage"])
        configs = ModelConfigs.from_dict(checkpoint.config["models"])
    except KeyError as exc:
        raise CheckpointError(f"checkpoint config lacks {exc.args[0]!r}") from exc
    except ValueError as exc:
        raise CheckpointError(str(exc)) from exc
    precision = next(iter(checkpoint.tensors.values())).precision if checkpoint.tensors else Precision.DEFAULT
    models = SceneModels()
    try:
        if stage in (Stage.GRAPH_STREAM, Stage.FUSION, Stage.END_TO_END):
            models.gnn = GnnModel(configs.gnn, checkpoint.to_store(GnnModel.PREFIX, precision))
        if stage in (Stage.IMAGE_STREAM, Stage.FUSION, Stage.END_TO_END):
            models.vit = VitModel(configs.vit, checkpoint.to_store(VitModel.PREFIX, precision))
        if stage in (Stage.FUSION, Stage.END_TO_END):
            if configs.fusion.mode.is_vote:
                models.fusion = FusionModel(configs.fusion, precision=precision)
            else:
                models.fusion = FusionModel(configs.fusion, checkpoint.to_store(FusionModel.PREFIX, precision))
    except ContractError as exc:
        raise CheckpointError(f"checkpoint tensors do not match its config: {exc}") from exc
    return models


def merge_checkpoints(checkpoints: Mapping[str, Checkpoint]) -> Checkpoint:
    """Combine stream checkpoints; a tensor name may appear only once."""
    merged = Checkpoint()
    for source, checkpoint in checkpoints.items():
        for name, tensor in checkpoint.tensors.items():
            if name in merged.tensors:
                raise CheckpointError(f"tensor {name!r} appears in more than one checkpoint ({source})")
            merged.tensors[name] = tensor
    return merged


__all__ = [
    "ModelConfigs",
    "PathsConfig",
    "RunConfig",
    "apply_overrides",
    "build_models",
    "load_run_config",
    "merge_checkpoints",
    "models_from_checkpoint",
    "resolve_model_configs",
]
