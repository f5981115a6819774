"""
Scene Fusion - Staged two-stream training.

Stages:
    graph_stream  train the graph model alone on the scene label
    image_stream  train the image model alone on the scene label
    fusion        train the fusion parameters; backbones frozen by default
    end_to_end    train everything jointly

Training is single-threaded and deterministic for a given seed: the shuffle
order comes from one generator seeded by TrainConfig.seed.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from scene_fusion.autodiff import Var, add, scale
from scene_fusion.datakit import Dataset, Sample
from scene_fusion.errors import ConfigError, DataError
from scene_fusion.fusion import (
    FusionModel,
    FusionOutput,
    SampleFeatures,
    StreamFeatures,
    info_nce_loss,
)
from scene_fusion.gnn import GnnModel, GraphBatch
from scene_fusion.losses import cross_entropy
from scene_fusion.optim import Optimizer, OptimizerKind
from scene_fusion.params import ParamStore, backward
from scene_fusion.scenegraph import ExtractionOptions
from scene_fusion.vision import VitModel

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


class Stage(Enum):
    GRAPH_STREAM = "graph_stream"
    IMAGE_STREAM = "image_stream"
    FUSION = "fusion"
    END_TO_END = "end_to_end"


@dataclass
class TrainConfig:
    optimizer: OptimizerKind = OptimizerKind.ADAM
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    batch_size: int = 32
    epochs: int = 20
    seed: int = 0
    stage: Stage = Stage.GRAPH_STREAM
    freeze_graph: bool = True
    freeze_image: bool = True
    contrastive_weight: float = 0.0
    cache_features: bool = True

    def __post_init__(self) -> None:
        try:
            self.optimizer = OptimizerKind(self.optimizer)
            self.stage = Stage(self.stage)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def validate(self) -> None:
        # lr == 0 is accepted: it runs the loop without moving any parameter
        if not self.learning_rate >= 0:
            raise ConfigError(f"learning_rate must be non-negative, got {self.learning_rate}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be non-negative, got {self.weight_decay}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be at least 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be at least 1, got {self.batch_size}")
        if self.contrastive_weight < 0:
            raise ConfigError("contrastive_weight must be non-negative")


# =============================================================================
# Model bundle
# =============================================================================


@dataclass(eq=False)
class SceneModels:
    """The three trainable components sharing one namespaced parameter store."""

    gnn: Optional[GnnModel] = None
    vit: Optional[VitModel] = None
    fusion: Optional[FusionModel] = None
    _params: Optional[ParamStore] = field(default=None, repr=False)

    @property
    def params(self) -> ParamStore:
        if self._params is None:
            models = [m for m in (self.gnn, self.vit, self.fusion) if m is not None]
            if not models:
                raise ConfigError("no models configured")
            merged = ParamStore(models[0].params.precision)
            for model in models:
                merged.merge(model.params)
            self._params = merged
        return self._params

    def require(self, stage: Stage) -> None:
        needs = {
            Stage.GRAPH_STREAM: ("gnn",),
            Stage.IMAGE_STREAM: ("vit",),
            Stage.FUSION: ("gnn", "vit", "fusion"),
            Stage.END_TO_END: ("gnn", "vit", "fusion"),
        }[stage]
        missing = [name for name in needs if getattr(self, name) is None]
        if missing:
            raise ConfigError(f"stage {stage.value} needs models: {', '.join(missing)}")
        if stage in (Stage.FUSION, Stage.END_TO_END):
            self.fusion_model().check_streams(self.graph_model(), self.image_model())

    def graph_model(self) -> GnnModel:
        if self.gnn is None:
            raise ConfigError("no graph stream model configured")
        return self.gnn

    def image_model(self) -> VitModel:
        if self.vit is None:
            raise ConfigError("no image stream model configured")
        return self.vit

    def fusion_model(self) -> FusionModel:
        if self.fusion is None:
            raise ConfigError("no fusion model configured")
        return self.fusion

    def trainable(self, config: TrainConfig) -> ParamStore:
        params = self.params
        if config.stage is Stage.GRAPH_STREAM:
            return params.subset(GnnModel.PREFIX)
        if config.stage is Stage.IMAGE_STREAM:
            return params.subset(VitModel.PREFIX)
        if config.stage is Stage.END_TO_END:
            return params
        view = params.subset(FusionModel.PREFIX)
        if not config.freeze_graph:
            view.merge(params.subset(GnnModel.PREFIX))
        if not config.freeze_image:
            view.merge(params.subset(VitModel.PREFIX))
        return view


# =============================================================================
# Forward passes
# =============================================================================


class FeatureCache:
    """Frozen-backbone stream outputs, computed once per sample."""

    def __init__(self) -> None:
        self._features: Dict[str, SampleFeatures] = {}

    def __len__(self) -> int:
        return len(self._features)

    def get(self, models: SceneModels, samples: Sequence[Sample], options: ExtractionOptions) -> StreamFeatures:
        missing = [s for s in samples if s.sample_id not in self._features]
        if missing:
            computed = stream_features(models, missing, options).split()
            for sample, feats in zip(missing, computed):
                self._features[sample.sample_id] = feats
        return StreamFeatures.collate([self._features[s.sample_id] for s in samples])


def stream_features(models: SceneModels, samples: Sequence[Sample], options: ExtractionOptions) -> StreamFeatures:
    gnn, vit = models.graph_model(), models.image_model()
    batch = GraphBatch.from_graphs([s.graph(options) for s in samples])
    return StreamFeatures.from_outputs(gnn.forward(batch), batch.ranges, vit.forward([s.image for s in samples]))


@dataclass
class BatchOutput:
    logits: Var
    fusion: Optional[FusionOutput] = None


def forward_batch(
    models: SceneModels,
    samples: Sequence[Sample],
    stage: Stage,
    options: ExtractionOptions,
    cache: Optional[FeatureCache] = None,
    detach_graph: bool = False,
    detach_image: bool = False,
) -> BatchOutput:
    """Logits of the model a stage trains, for a batch of samples."""
    if stage is Stage.GRAPH_STREAM:
        batch = GraphBatch.from_graphs([s.graph(options) for s in samples])
        return BatchOutput(models.graph_model().forward(batch).logits)
    if stage is Stage.IMAGE_STREAM:
        return BatchOutput(models.image_model().forward([s.image for s in samples]).logits)

    fusion = models.fusion_model()
    if cache is not None:
        features = cache.get(models, samples, options)
    else:
        features = stream_features(models, samples, options)
        if detach_graph or detach_image:
            frozen = features.detached()
            features = StreamFeatures(
                frozen.graph_embeddings if detach_graph else features.graph_embeddings,
                frozen.node_embeddings if detach_graph else features.node_embeddings,
                features.node_ranges,
                frozen.graph_logits if detach_graph else features.graph_logits,
                frozen.image_cls if detach_image else features.image_cls,
                frozen.image_tokens if detach_image else features.image_tokens,
                features.token_ranges,
                frozen.image_logits if detach_image else features.image_logits,
            )
    out = fusion.forward(features)
    return BatchOutput(out.logits, out)


# =============================================================================
# Metrics
# =============================================================================


@dataclass
class EvalResult:
    """One evaluation pass: loss, top-1 accuracy and the predictions."""

    loss: float
    accuracy: float
    count: int
    predictions: List[int] = field(default_factory=list)

    @property
    def correct(self) -> int:
        return int(round(self.accuracy * self.count))

    def to_dict(self) -> Dict[str, object]:
        return {"loss": self.loss, "accuracy": self.accuracy, "count": self.count}


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    train_accuracy: float
    test_loss: Optional[float] = None
    test_accuracy: Optional[float] = None
    seconds: float = 0.0


@dataclass
class Metrics:
    """Per-epoch history of one training run."""

    stage: Stage
    epochs: List[EpochMetrics] = field(default_factory=list)

    @property
    def last(self) -> EpochMetrics:
        if not self.epochs:
            raise DataError("no epochs recorded")
        return self.epochs[-1]

    def rows(self) -> List[Tuple[int, str, float, float]]:
        out = []
        for m in self.epochs:
            out.append((m.epoch, "train", m.train_loss, m.train_accuracy))
            if m.test_accuracy is not None and m.test_loss is not None:
                out.append((m.epoch, "test", m.test_loss, m.test_accuracy))
        return out

    def to_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(["epoch", "split", "loss", "accuracy"])
        for epoch, split, loss, accuracy in self.rows():
            writer.writerow([epoch, split, repr(loss), repr(accuracy)])
        return buffer.getvalue()

    def final(self) -> Dict[str, Optional[float]]:
        last = self.last
        return {
            "train_loss": last.train_loss,
            "train_accuracy": last.train_accuracy,
            "test_loss": last.test_loss,
            "test_accuracy": last.test_accuracy,
        }

    def summary(self, include_time: bool = False) -> Dict[str, object]:
        document: Dict[str, object] = {
            "stage": self.stage.value,
            "epochs": len(self.epochs),
            "final": self.final(),
            "history": [
                {
                    "epoch": m.epoch,
                    "train_loss": m.train_loss,
                    "train_accuracy": m.train_accuracy,
                    "test_loss": m.test_loss,
                    "test_accuracy": m.test_accuracy,
                }
                for m in self.epochs
            ],
        }
        if include_time:
            document["seconds"] = sum(m.seconds for m in self.epochs)
        return document

    def write(self, out_dir: PathLike, include_time: bool = False) -> Tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        csv_path = out / "metrics.csv"
        json_path = out / "metrics.json"
        csv_path.write_text(self.to_csv(), encoding="utf-8")
        json_path.write_text(json.dumps(self.summary(include_time), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return csv_path, json_path


@dataclass
class TrainResult:
    params: ParamStore
    metrics: Metrics


# =============================================================================
# Evaluation and training loop
# =============================================================================


def _labels(samples: Sequence[Sample], num_classes: int) -> List[int]:
    labels = [s.label for s in samples]
    for sample in samples:
        if not 0 <= sample.label < num_classes:
            raise DataError(f"sample {sample.sample_id!r} label {sample.label} outside [0, {num_classes})")
    return labels


def evaluate(
    models: SceneModels,
    samples: Sequence[Sample],
    stage: Union[Stage, str],
    options: Optional[ExtractionOptions] = None,
    batch_size: int = 64,
    cache: Optional[FeatureCache] = None,
) -> EvalResult:
    """Mean cross-entropy and top-1 accuracy (ties go to the lower class)."""
    stage = Stage(stage)
    models.require(stage)
    if not samples:
        raise DataError("cannot evaluate an empty sample set")
    options = options or ExtractionOptions()
    total_loss = 0.0
    predictions: List[int] = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        logits = forward_batch(models, chunk, stage, options, cache).logits
        labels = _labels(chunk, logits.cols)
        total_loss += cross_entropy(logits, labels).item() * len(chunk)
        predictions.extend(int(p) for p in np.argmax(logits.value, axis=1))
    correct = sum(int(p == s.label) for p, s in zip(predictions, samples))
    return EvalResult(total_loss / len(samples), correct / len(samples), len(samples), predictions)


def train(models: SceneModels, dataset: Dataset, config: TrainConfig) -> TrainResult:
    """Run the configured stage; returns the (shared) parameters and history."""
    config.validate()
    stage = config.stage
    models.require(stage)
    train_samples = dataset.train
    if not train_samples:
        raise DataError("training split is empty")
    test_samples = dataset.test
    options = dataset.options

    trainable = models.trainable(config)
    optimizer = Optimizer(config.optimizer, config.learning_rate, config.weight_decay)
    fusion_stage = stage in (Stage.FUSION, Stage.END_TO_END)
    detach_graph = stage is Stage.FUSION and config.freeze_graph
    detach_image = stage is Stage.FUSION and config.freeze_image
    cache = FeatureCache() if (detach_graph and detach_image and config.cache_features) else None
    if len(trainable) == 0:
        logger.warning("stage %s has no trainable parameters; evaluating only", stage.value)

    rng = np.random.default_rng(config.seed)
    metrics = Metrics(stage)
    logger.info(
        "training stage=%s samples=%d params=%d optimizer=%s lr=%g",
        stage.value,
        len(train_samples),
        trainable.count(),
        config.optimizer.value,
        config.learning_rate,
    )
    for epoch in range(1, config.epochs + 1):
        started = time.perf_counter()
        order = rng.permutation(len(train_samples))
        loss_sum = 0.0
        correct = 0
        for start in range(0, len(order), config.batch_size):
            batch = [train_samples[i] for i in order[start : start + config.batch_size]]
            out = forward_batch(models, batch, stage, options, cache, detach_graph, detach_image)
            labels = _labels(batch, out.logits.cols)
            loss = cross_entropy(out.logits, labels)
            objective = loss
            if (
                fusion_stage
                and config.contrastive_weight > 0
                and len(batch) >= 2
                and out.fusion is not None
                and out.fusion.graph_projected is not None
                and out.fusion.image_projected is not None
            ):
                contrastive = info_nce_loss(
                    out.fusion.graph_projected, out.fusion.image_projected, models.fusion_model().config.temperature
                )
                objective = add(loss, scale(contrastive, config.contrastive_weight))
            loss_sum += loss.item() * len(batch)
            correct += int(np.sum(np.argmax(out.logits.value, axis=1) == np.asarray(labels)))
            if len(trainable) and objective.requires_grad:
                backward(objective, trainable)
                optimizer.step(trainable)

        test = evaluate(models, test_samples, stage, options, cache=cache) if test_samples else None
        seconds = time.perf_counter() - started
        row = EpochMetrics(
            epoch,
            loss_sum / len(train_samples),
            correct / len(train_samples),
            test.loss if test else None,
            test.accuracy if test else None,
            seconds,
        )
        metrics.epochs.append(row)
        logger.info(
            "stage=%s epoch=%d loss=%.4f train_acc=%.4f test_acc=%s seconds=%.2f",
            stage.value,
            epoch,
            row.train_loss,
            row.train_accuracy,
            "n/a" if row.test_accuracy is None else f"{row.test_accuracy:.4f}",
            seconds,
        )
    return TrainResult(models.params, metrics)


__all__ = [
    "BatchOutput",
    "EpochMetrics",
    "EvalResult",
    "FeatureCache",
    "Metrics",
    "SceneModels",
    "Stage",
    "TrainConfig",
    "TrainResult",
    "evaluate",
    "forward_batch",
    "stream_features",
    "train",
]
