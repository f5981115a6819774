"""
Scene Fusion - Two-stream fusion.

The graph stream supplies a pre-head graph embedding (and node embeddings);
the image stream supplies its cls embedding (and all token rows). A
FusionModel combines them and classifies:

    cross_attention  one modality's projected vector queries the other's
                     projected tokens; output = Wo(sum_i w_i Wv k_i) + q
    concat           [g || v] (projection optional)
    sum / average / product
                     elementwise on the projected vectors
    vote_soft / vote_hard
                     combine the two streams' own logits; no fusion head

Parameters live under the "fuse." namespace.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from scene_fusion.autodiff import (
    Var,
    add,
    concat_cols,
    concat_rows,
    constant,
    exp,
    l2_normalize_rows,
    log,
    log_softmax_rows,
    matmul,
    mul,
    relu,
    rowwise_softmax,
    scale,
    slice_rows,
    sub,
)
from scene_fusion.errors import ConfigError, ContractError, DimensionError
from scene_fusion.gnn import GnnModel, GnnOutput, GraphBatch
from scene_fusion.losses import cross_entropy
from scene_fusion.params import InitScheme, ParamStore, ensure_params, init_params
from scene_fusion.scenegraph import ExtractionOptions, LabelMap, build_scene_graph
from scene_fusion.tensor import Precision, Tensor2D
from scene_fusion.vision import ImageTensor, VitModel, VitOutput

logger = logging.getLogger(__name__)

ArrayLike = Union[Var, Tensor2D, np.ndarray, Sequence[Sequence[float]], Sequence[float]]


class FusionMode(Enum):
    CROSS_ATTENTION = "cross_attention"
    CONCAT = "concat"
    SUM = "sum"
    AVERAGE = "average"
    PRODUCT = "product"
    VOTE_SOFT = "vote_soft"
    VOTE_HARD = "vote_hard"

    @property
    def is_vote(self) -> bool:
        return self in (FusionMode.VOTE_SOFT, FusionMode.VOTE_HARD)

    @property
    def is_elementwise(self) -> bool:
        return self in (FusionMode.SUM, FusionMode.AVERAGE, FusionMode.PRODUCT)


class QueryModality(Enum):
    GRAPH = "graph"
    IMAGE = "image"


@dataclass
class FusionConfig:
    mode: FusionMode = FusionMode.CROSS_ATTENTION
    g_dim: int = 64
    v_dim: int = 64
    f_dim: int = 64
    num_scene_classes: int = 2
    head_hidden_dim: Optional[int] = None  # None: f_dim; 0: single linear layer
    query_modality: QueryModality = QueryModality.GRAPH
    project_concat: bool = False
    with_projections: bool = False
    temperature: float = 0.07

    def __post_init__(self) -> None:
        self.mode = FusionMode(self.mode)
        self.query_modality = QueryModality(self.query_modality)

    def validate(self) -> None:
        if min(self.g_dim, self.v_dim, self.f_dim) < 1:
            raise ConfigError("fusion dims must be positive")
        if self.num_scene_classes < 2:
            raise ConfigError("fusion needs at least two scene classes")
        if self.head_hidden_dim is not None and self.head_hidden_dim < 0:
            raise ConfigError("head_hidden_dim must be non-negative")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")

    @property
    def uses_projections(self) -> bool:
        if self.mode is FusionMode.CROSS_ATTENTION or self.mode.is_elementwise:
            return True
        return self.with_projections or (self.mode is FusionMode.CONCAT and self.project_concat)

    @property
    def hidden_dim(self) -> int:
        return self.f_dim if self.head_hidden_dim is None else self.head_hidden_dim

    @property
    def head_in_dim(self) -> int:
        if self.mode is FusionMode.CONCAT:
            return 2 * self.f_dim if self.project_concat else self.g_dim + self.v_dim
        return self.f_dim


# =============================================================================
# Stream features
# =============================================================================


@dataclass
class SampleFeatures:
    """One sample's frozen stream outputs, stored as arrays."""

    graph_embedding: np.ndarray  # 1 x g
    node_embeddings: np.ndarray  # n x g
    graph_logits: np.ndarray  # 1 x K
    image_cls: np.ndarray  # 1 x v
    image_tokens: np.ndarray  # T x v
    image_logits: np.ndarray  # 1 x K


@dataclass
class StreamFeatures:
    """Batched stream outputs feeding the fusion model."""

    graph_embeddings: Var
    node_embeddings: Var
    node_ranges: List[Tuple[int, int]]
    graph_logits: Var
    image_cls: Var
    image_tokens: Var
    token_ranges: List[Tuple[int, int]]
    image_logits: Var

    @property
    def batch_size(self) -> int:
        return self.graph_embeddings.rows

    @classmethod
    def from_outputs(cls, gnn_out: GnnOutput, node_ranges: List[Tuple[int, int]], vit_out: VitOutput) -> StreamFeatures:
        if gnn_out.graph_embeddings.rows != vit_out.cls.rows:
            raise DimensionError("stream batch", gnn_out.graph_embeddings.shape, vit_out.cls.shape)
        return cls(
            gnn_out.graph_embeddings,
            gnn_out.node_embeddings,
            list(node_ranges),
            gnn_out.logits,
            vit_out.cls,
            vit_out.tokens,
            list(vit_out.token_ranges),
            vit_out.logits,
        )

    def detached(self) -> StreamFeatures:
        return StreamFeatures(
            self.graph_embeddings.detach(),
            self.node_embeddings.detach(),
            self.node_ranges,
            self.graph_logits.detach(),
            self.image_cls.detach(),
            self.image_tokens.detach(),
            self.token_ranges,
            self.image_logits.detach(),
        )

    def split(self) -> List[SampleFeatures]:
        out = []
        for b in range(self.batch_size):
            ns, ne = self.node_ranges[b]
            ts, te = self.token_ranges[b]
            out.append(
                SampleFeatures(
                    self.graph_embeddings.value[b : b + 1].copy(),
                    self.node_embeddings.value[ns:ne].copy(),
                    self.graph_logits.value[b : b + 1].copy(),
                    self.image_cls.value[b : b + 1].copy(),
                    self.image_tokens.value[ts:te].copy(),
                    self.image_logits.value[b : b + 1].copy(),
                )
            )
        return out

    @classmethod
    def collate(cls, samples: Sequence[SampleFeatures]) -> StreamFeatures:
        if not samples:
            raise ContractError("cannot collate an empty batch")

        def ranges(sizes: List[int]) -> List[Tuple[int, int]]:
            bounds = np.cumsum([0, *sizes]).tolist()
            return [(bounds[i], bounds[i + 1]) for i in range(len(sizes))]

        return cls(
            constant(np.vstack([s.graph_embedding for s in samples])),
            constant(np.vstack([s.node_embeddings for s in samples])),
            ranges([s.node_embeddings.shape[0] for s in samples]),
            constant(np.vstack([s.graph_logits for s in samples])),
            constant(np.vstack([s.image_cls for s in samples])),
            constant(np.vstack([s.image_tokens for s in samples])),
            ranges([s.image_tokens.shape[0] for s in samples]),
            constant(np.vstack([s.image_logits for s in samples])),
        )


@dataclass
class FusionOutput:
    logits: Var
    graph_projected: Optional[Var] = None
    image_projected: Optional[Var] = None
    attention: List[np.ndarray] = field(default_factory=list)  # per sample: 1 x tokens


# =============================================================================
# Model
# =============================================================================


class FusionModel:
    PREFIX = "fuse."

    def __init__(
        self,
        config: FusionConfig,
        params: Optional[ParamStore] = None,
        seed: int = 0,
        precision: Precision = Precision.DEFAULT,
    ):
        config.validate()
        self.config = config
        if params is None:
            params = ParamStore(precision)
            rng = np.random.default_rng(seed)
            for name, shape in self.parameter_shapes().items():
                scheme = InitScheme.ZEROS if ".b" in name else InitScheme.XAVIER_UNIFORM
                params.add(name, init_params(shape, scheme, rng, precision=precision))
        else:
            ensure_params(params, self.parameter_shapes())
        self.params = params

    @classmethod
    def name(cls, suffix: str) -> str:
        return cls.PREFIX + suffix

    def parameter_shapes(self) -> Dict[str, Tuple[int, int]]:
        cfg = self.config
        f = cfg.f_dim
        shapes: Dict[str, Tuple[int, int]] = {}
        if cfg.uses_projections:
            shapes[self.name("proj_g.W")] = (cfg.g_dim, f)
            shapes[self.name("proj_g.b")] = (1, f)
            shapes[self.name("proj_v.W")] = (cfg.v_dim, f)
            shapes[self.name("proj_v.b")] = (1, f)
        if cfg.mode is FusionMode.CROSS_ATTENTION:
            for part in ("Wq", "Wk", "Wv", "Wo"):
                shapes[self.name(f"attn.{part}")] = (f, f)
        if not cfg.mode.is_vote:
            k = cfg.num_scene_classes
            if cfg.hidden_dim:
                shapes[self.name("head.W1")] = (cfg.head_in_dim, cfg.hidden_dim)
                shapes[self.name("head.b1")] = (1, cfg.hidden_dim)
                shapes[self.name("head.W2")] = (cfg.hidden_dim, k)
                shapes[self.name("head.b2")] = (1, k)
            else:
                shapes[self.name("head.W")] = (cfg.head_in_dim, k)
                shapes[self.name("head.b")] = (1, k)
        return shapes

    def check_streams(self, gnn: GnnModel, vit: VitModel) -> None:
        cfg = self.config
        if gnn.config.hidden_dim != cfg.g_dim:
            raise ContractError(f"fusion g_dim {cfg.g_dim} != gnn hidden_dim {gnn.config.hidden_dim}")
        if vit.config.embed_dim != cfg.v_dim:
            raise ContractError(f"fusion v_dim {cfg.v_dim} != vit embed_dim {vit.config.embed_dim}")
        k = {cfg.num_scene_classes, gnn.config.num_scene_classes, vit.config.num_scene_classes}
        if len(k) != 1:
            raise ContractError(f"scene class counts disagree: {sorted(k)}")

    def _p(self, suffix: str) -> Var:
        return self.params.var(self.name(suffix))

    def project_graph(self, x: Var) -> Var:
        return add(matmul(x, self._p("proj_g.W")), self._p("proj_g.b"))

    def project_image(self, x: Var) -> Var:
        return add(matmul(x, self._p("proj_v.W")), self._p("proj_v.b"))

    def head(self, x: Var) -> Var:
        if self.config.hidden_dim:
            hidden = relu(add(matmul(x, self._p("head.W1")), self._p("head.b1")))
            return add(matmul(hidden, self._p("head.W2")), self._p("head.b2"))
        return add(matmul(x, self._p("head.W")), self._p("head.b"))

    def forward(self, features: StreamFeatures) -> FusionOutput:
        cfg = self.config
        mode = cfg.mode
        if mode.is_vote:
            return FusionOutput(vote_log_probs(features.graph_logits, features.image_logits, mode))

        g_proj = v_proj = None
        if cfg.uses_projections:
            g_proj = self.project_graph(features.graph_embeddings)
            v_proj = self.project_image(features.image_cls)

        attention: List[np.ndarray] = []
        if mode is FusionMode.CROSS_ATTENTION:
            fused_rows = []
            if cfg.query_modality is QueryModality.GRAPH:
                queries, kv_all, kv_ranges = g_proj, self.project_image(features.image_tokens), features.token_ranges
            else:
                queries, kv_all, kv_ranges = v_proj, self.project_graph(features.node_embeddings), features.node_ranges
            for b, (start, stop) in enumerate(kv_ranges):
                fused, weights = cross_attention_fuse(
                    slice_rows(queries, b, b + 1), slice_rows(kv_all, start, stop), self
                )
                fused_rows.append(fused)
                attention.append(weights)
            fused_all = concat_rows(fused_rows) if len(fused_rows) > 1 else fused_rows[0]
        else:
            fused_all = simple_fuse(features.graph_embeddings, features.image_cls, mode, self)
        return FusionOutput(self.head(fused_all), g_proj, v_proj, attention)


# =============================================================================
# Fusion operators
# =============================================================================


def cross_attention_fuse(query: Var, kv_tokens: Var, model: FusionModel) -> Tuple[Var, np.ndarray]:
    """Scaled dot-product attention of one query row over key/value tokens.

    Returns the fused 1 x f_dim row and the 1 x tokens attention weights.
    """
    if kv_tokens.rows == 0:
        raise ContractError("cross-attention needs at least one key/value token")
    f = model.config.f_dim
    if query.shape != (1, f) or kv_tokens.cols != f:
        raise DimensionError("cross_attention_fuse", query.shape, kv_tokens.shape)
    q = matmul(query, model._p("attn.Wq"))
    k = matmul(kv_tokens, model._p("attn.Wk"))
    v = matmul(kv_tokens, model._p("attn.Wv"))
    weights = rowwise_softmax(scale(matmul(q, k.T), 1.0 / math.sqrt(f)))
    out = matmul(matmul(weights, v), model._p("attn.Wo"))
    return add(out, query), weights.value


def simple_fuse(
    g_vec: Var,
    v_vec: Var,
    mode: Union[FusionMode, str],
    model: Optional[FusionModel] = None,
) -> Var:
    """Concat / sum / average / product of the two stream vectors.

    With a model, sum/average/product (and concat when `project_concat`) use its
    projections first; without one the raw vectors must agree in width.
    """
    mode = FusionMode(mode)
    if mode is FusionMode.CROSS_ATTENTION or mode.is_vote:
        raise ContractError(f"simple_fuse does not handle mode {mode.value}")
    if model is not None and (mode.is_elementwise or model.config.project_concat):
        g_vec, v_vec = model.project_graph(g_vec), model.project_image(v_vec)
    if mode is FusionMode.CONCAT:
        return concat_cols([g_vec, v_vec])
    if g_vec.shape != v_vec.shape:
        raise DimensionError(f"simple_fuse {mode.value}", g_vec.shape, v_vec.shape)
    if mode is FusionMode.SUM:
        return add(g_vec, v_vec)
    if mode is FusionMode.AVERAGE:
        return scale(add(g_vec, v_vec), 0.5)
    return mul(g_vec, v_vec)


def _as_matrix(x: ArrayLike) -> np.ndarray:
    if isinstance(x, Var):
        return x.value.astype(np.float64)
    if isinstance(x, Tensor2D):
        return x.data.astype(np.float64)
    array = np.asarray(x, dtype=np.float64)
    return array.reshape(1, -1) if array.ndim == 1 else array


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _hard_choice(pg: np.ndarray, pv: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Per row: voted class and whether the graph stream's distribution wins."""
    ag, av = pg.argmax(axis=1), pv.argmax(axis=1)
    cg, cv = pg.max(axis=1), pv.max(axis=1)
    graph_wins = (cg > cv) | ((cg == cv) & (ag <= av))
    return np.where(graph_wins, ag, av), graph_wins


@dataclass
class VoteResult:
    classes: List[int]
    distribution: Optional[np.ndarray] = None  # soft voting only, rows x K


def vote_fuse(logits_g: ArrayLike, logits_v: ArrayLike, mode: Union[FusionMode, str] = "soft") -> VoteResult:
    """Combine two streams' logits by soft or hard voting (row-wise)."""
    if isinstance(mode, str) and mode in ("soft", "hard"):
        mode = f"vote_{mode}"
    mode = FusionMode(mode)
    if not mode.is_vote:
        raise ContractError(f"vote_fuse needs a vote mode, got {mode.value}")
    lg, lv = _as_matrix(logits_g), _as_matrix(logits_v)
    if lg.shape != lv.shape:
        raise DimensionError("vote_fuse", lg.shape, lv.shape)
    pg, pv = _softmax(lg), _softmax(lv)
    if mode is FusionMode.VOTE_SOFT:
        dist = 0.5 * (pg + pv)
        return VoteResult([int(c) for c in dist.argmax(axis=1)], dist)
    classes, _ = _hard_choice(pg, pv)
    return VoteResult([int(c) for c in classes])


def vote_log_probs(logits_g: Var, logits_v: Var, mode: FusionMode) -> Var:
    """Differentiable log-distribution behind each vote, usable as logits."""
    if logits_g.shape != logits_v.shape:
        raise DimensionError("vote", logits_g.shape, logits_v.shape)
    lg, lv = log_softmax_rows(logits_g), log_softmax_rows(logits_v)
    if mode is FusionMode.VOTE_SOFT:
        shift = constant(np.maximum(lg.value, lv.value))
        mixed = add(exp(sub(lg, shift)), exp(sub(lv, shift)))
        return sub(add(log(mixed), shift), constant(np.full((1, 1), math.log(2.0), dtype=lg.dtype)))
    _, graph_wins = _hard_choice(np.exp(lg.value), np.exp(lv.value))
    pick_g = graph_wins.astype(lg.dtype).reshape(-1, 1)
    return add(mul(lg, constant(pick_g)), mul(lv, constant(1.0 - pick_g)))


def info_nce_loss(graph_embs: Var, image_embs: Var, temperature: float = 0.07) -> Var:
    """Symmetric InfoNCE over a batch of matched (graph, image) rows."""
    if graph_embs.rows < 2:
        raise ContractError("InfoNCE needs a batch of at least two pairs")
    if temperature <= 0:
        raise ContractError(f"temperature must be positive, got {temperature}")
    if graph_embs.shape != image_embs.shape:
        raise DimensionError("info_nce_loss", graph_embs.shape, image_embs.shape)
    g = l2_normalize_rows(graph_embs)
    v = l2_normalize_rows(image_embs)
    similarity = scale(matmul(g, v.T), 1.0 / temperature)
    targets = list(range(graph_embs.rows))
    return scale(add(cross_entropy(similarity, targets), cross_entropy(similarity.T, targets)), 0.5)


def fused_classify(
    image: ImageTensor,
    label_map: LabelMap,
    gnn_model: GnnModel,
    vit_model: VitModel,
    fusion_model: FusionModel,
    options: Optional[ExtractionOptions] = None,
) -> Tensor2D:
    """Two-stream logits (1 x num_scene_classes) for one (image, label map) pair."""
    fusion_model.check_streams(gnn_model, vit_model)
    graph = build_scene_graph(label_map, options)
    if graph.num_classes != gnn_model.config.in_dim:
        raise ContractError(
            f"label map has {graph.num_classes} classes, gnn expects {gnn_model.config.in_dim}"
        )
    batch = GraphBatch.from_graphs([graph])
    features = StreamFeatures.from_outputs(gnn_model.forward(batch), batch.ranges, vit_model.forward([image]))
    return fusion_model.forward(features).logits.tensor()


__all__ = [
    "FusionConfig",
    "FusionMode",
    "FusionModel",
    "FusionOutput",
    "QueryModality",
    "SampleFeatures",
    "StreamFeatures",
    "VoteResult",
    "cross_attention_fuse",
    "fused_classify",
    "info_nce_loss",
    "simple_fuse",
    "vote_fuse",
    "vote_log_probs",
]
