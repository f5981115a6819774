"""
Scene Fusion - Graph representation stream.

Three stacked graph layers turn one-hot node features into node embeddings;
a readout pools them per graph and a linear head predicts the scene label.

Layer kinds:
1. GCN: H' = act(D^-1/2 (A + I) D^-1/2 H W)
2. SAGE (mean aggregator): h'_v = act(W . [h_v || mean_{u in N(v)} h_u])
3. GAT (single head): h'_i = act(sum_j alpha_ij W h_j), with
   alpha_i = softmax_j(LeakyReLU(a . [W h_i || W h_j])) over N(i) + {i}

Graphs are batched block-diagonally; readout never mixes graphs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from scene_fusion.autodiff import (
    ActivationKind,
    DEFAULT_LEAKY_SLOPE,
    Var,
    activation,
    add,
    column_max,
    concat_cols,
    concat_rows,
    constant,
    leaky_relu,
    matmul,
    mul,
    rowwise_softmax,
    slice_rows,
)
from scene_fusion.errors import ConfigError, ContractError, DimensionError
from scene_fusion.params import InitScheme, ParamStore, ensure_params, init_params
from scene_fusion.scenegraph import Edge, SceneGraph
from scene_fusion.tensor import Precision, Tensor2D

logger = logging.getLogger(__name__)

NUM_LAYERS = 3

Neighbors = Union[np.ndarray, Sequence[Sequence[int]]]


class LayerKind(Enum):
    GCN = "gcn"
    SAGE = "sage"
    GAT = "gat"


class Readout(Enum):
    SUM = "sum"
    MEAN = "mean"
    MAX = "max"


# =============================================================================
# Graph structure helpers
# =============================================================================


@dataclass(frozen=True, eq=False)
class NormalizedAdjacency:
    """D~^-1/2 A~ D~^-1/2 with A~ = A + I."""

    n: int
    matrix: Tensor2D


def normalize_adjacency(
    edges: Iterable[Edge], n: int, precision: Precision = Precision.TEST
) -> NormalizedAdjacency:
    if n <= 0:
        raise ContractError("normalize_adjacency needs at least one node")
    a = np.eye(n, dtype=np.float64)
    for i, j in edges:
        if not (0 <= i < n and 0 <= j < n) or i == j:
            raise ContractError(f"edge ({i}, {j}) invalid over {n} nodes")
        a[i, j] = a[j, i] = 1.0
    return NormalizedAdjacency(n, Tensor2D(_sym_normalize(a).astype(precision.dtype)))


def _sym_normalize(a_tilde: np.ndarray) -> np.ndarray:
    inv_sqrt = 1.0 / np.sqrt(a_tilde.sum(axis=1))
    return a_tilde * inv_sqrt[:, None] * inv_sqrt[None, :]


def _as_adjacency(neighbors: Neighbors, n: int) -> np.ndarray:
    if isinstance(neighbors, np.ndarray):
        adj = neighbors.astype(bool)
        if adj.shape != (n, n):
            raise DimensionError("adjacency", (n, n), adj.shape)
        return adj
    if len(neighbors) != n:
        raise DimensionError("neighbor lists", (n,), (len(neighbors),))
    adj = np.zeros((n, n), dtype=bool)
    for v, nbrs in enumerate(neighbors):
        for u in nbrs:
            if u == v:
                raise ContractError(f"node {v} lists itself as a neighbour")
            adj[v, u] = True
    return adj


def mean_neighbor_matrix(adjacency: np.ndarray) -> np.ndarray:
    """Row-normalized adjacency; rows of isolated nodes are zero."""
    adj = adjacency.astype(np.float64)
    degree = adj.sum(axis=1, keepdims=True)
    return np.divide(adj, degree, out=np.zeros_like(adj), where=degree > 0)


# =============================================================================
# Layers
# =============================================================================


def gcn_layer(
    h: Var,
    norm_adj: Union[NormalizedAdjacency, np.ndarray],
    w: Var,
    act: Union[ActivationKind, str] = ActivationKind.RELU,
) -> Var:
    matrix = norm_adj.matrix.data if isinstance(norm_adj, NormalizedAdjacency) else norm_adj
    if matrix.shape != (h.rows, h.rows):
        raise DimensionError("gcn_layer adjacency", matrix.shape, h.shape)
    a_hat = constant(matrix.astype(h.dtype, copy=False))
    return activation(matmul(a_hat, matmul(h, w)), act)


def sage_layer(
    h: Var,
    neighbors: Neighbors,
    w: Var,
    act: Union[ActivationKind, str] = ActivationKind.RELU,
) -> Var:
    if w.rows != 2 * h.cols:
        raise DimensionError("sage_layer weight", (2 * h.cols, w.cols), w.shape)
    mean = constant(mean_neighbor_matrix(_as_adjacency(neighbors, h.rows)).astype(h.dtype))
    h_neigh = matmul(mean, h)
    return activation(matmul(concat_cols([h, h_neigh]), w), act)


def gat_layer(
    h: Var,
    neighbors: Neighbors,
    w: Var,
    a: Var,
    slope: float = DEFAULT_LEAKY_SLOPE,
    act: Union[ActivationKind, str] = ActivationKind.RELU,
    include_self: bool = True,
) -> Tuple[Var, np.ndarray]:
    """Single-head graph attention; returns (output, attention matrix)."""
    out_dim = w.cols
    if a.shape != (2 * out_dim, 1):
        raise DimensionError("gat_layer attention vector", (2 * out_dim, 1), a.shape)
    adj = _as_adjacency(neighbors, h.rows)
    mask = adj | np.eye(h.rows, dtype=bool) if include_self else adj.copy()
    isolated = ~mask.any(axis=1)
    mask[isolated, isolated] = True

    wh = matmul(h, w)
    score_self = matmul(wh, slice_rows(a, 0, out_dim))
    score_other = matmul(wh, slice_rows(a, out_dim, 2 * out_dim))
    scores = leaky_relu(add(score_self, score_other.T), slope)
    alpha = rowwise_softmax(scores, mask)
    if np.any(isolated):
        keep = constant((~isolated).astype(h.dtype).reshape(-1, 1))
        alpha = mul(alpha, keep)
    return activation(matmul(alpha, wh), act), alpha.value


def readout(h: Var, ranges: Sequence[Tuple[int, int]], mode: Union[Readout, str] = Readout.MEAN) -> Var:
    """Pool node rows per graph into one row per graph."""
    mode = Readout(mode)
    for start, stop in ranges:
        if stop <= start:
            raise ContractError(f"empty graph in readout range ({start}, {stop})")
        if start < 0 or stop > h.rows:
            raise ContractError(f"readout range ({start}, {stop}) outside {h.rows} rows")
    if mode is Readout.MAX:
        return concat_rows([column_max(slice_rows(h, s, e)) for s, e in ranges])
    pool = np.zeros((len(ranges), h.rows), dtype=h.dtype)
    for g, (start, stop) in enumerate(ranges):
        pool[g, start:stop] = 1.0 if mode is Readout.SUM else 1.0 / (stop - start)
    return matmul(constant(pool), h)


# =============================================================================
# Batching
# =============================================================================


@dataclass(eq=False)
class GraphBatch:
    """Block-diagonal composition of several scene graphs."""

    features: np.ndarray
    adjacency: np.ndarray
    ranges: List[Tuple[int, int]]
    labels: Optional[np.ndarray] = None
    _normalized: Optional[np.ndarray] = field(default=None, repr=False)

    @classmethod
    def from_graphs(
        cls, graphs: Sequence[SceneGraph], labels: Optional[Sequence[int]] = None
    ) -> GraphBatch:
        if not graphs:
            raise ContractError("a graph batch needs at least one graph")
        num_classes = graphs[0].num_classes
        total = sum(g.num_nodes for g in graphs)
        features = np.zeros((total, num_classes))
        adjacency = np.zeros((total, total), dtype=bool)
        ranges = []
        offset = 0
        for graph in graphs:
            if graph.num_classes != num_classes:
                raise ContractError("graphs in a batch must share num_classes")
            if graph.num_nodes == 0:
                raise ContractError("empty graph in batch")
            n = graph.num_nodes
            features[offset : offset + n] = graph.features()
            adjacency[offset : offset + n, offset : offset + n] = graph.adjacency()
            ranges.append((offset, offset + n))
            offset += n
        label_array = None if labels is None else np.asarray(labels, dtype=np.int64)
        return cls(features, adjacency, ranges, label_array)

    @property
    def num_graphs(self) -> int:
        return len(self.ranges)

    @property
    def num_nodes(self) -> int:
        return int(self.features.shape[0])

    def normalized_adjacency(self) -> np.ndarray:
        if self._normalized is None:
            self._normalized = _sym_normalize(
                self.adjacency.astype(np.float64) + np.eye(self.num_nodes)
            )
        return self._normalized


# =============================================================================
# Model
# =============================================================================


@dataclass
class GnnConfig:
    """Shape and behaviour of the graph stream."""

    layer_kind: LayerKind = LayerKind.GCN
    in_dim: int = 8
    hidden_dim: int = 64
    num_scene_classes: int = 2
    readout: Readout = Readout.MEAN
    activation: ActivationKind = ActivationKind.RELU
    gat_slope: float = DEFAULT_LEAKY_SLOPE
    gat_include_self: bool = True

    def __post_init__(self) -> None:
        self.layer_kind = LayerKind(self.layer_kind)
        self.readout = Readout(self.readout)
        self.activation = ActivationKind(self.activation)

    def validate(self) -> None:
        if self.in_dim < 1 or self.hidden_dim < 1:
            raise ConfigError("gnn in_dim and hidden_dim must be positive")
        if self.num_scene_classes < 2:
            raise ConfigError("gnn needs at least two scene classes")
        if not 0.0 < self.gat_slope < 1.0:
            raise ConfigError(f"gat_slope must lie in (0, 1), got {self.gat_slope}")


@dataclass
class GnnOutput:
    node_embeddings: Var
    graph_embeddings: Var
    logits: Var
    attention: List[np.ndarray] = field(default_factory=list)


class GnnModel:
    """Three graph layers, readout and a linear head under the 'gnn.' namespace."""

    PREFIX = "gnn."

    def __init__(
        self,
        config: GnnConfig,
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
                scheme = InitScheme.ZEROS if name.endswith(".b") else InitScheme.XAVIER_UNIFORM
                params.add(name, init_params(shape, scheme, rng, precision=precision))
        else:
            ensure_params(params, self.parameter_shapes())
        self.params = params

    def parameter_shapes(self) -> Dict[str, Tuple[int, int]]:
        cfg = self.config
        shapes: Dict[str, Tuple[int, int]] = {}
        width = cfg.in_dim
        for layer in range(NUM_LAYERS):
            fan_in = 2 * width if cfg.layer_kind is LayerKind.SAGE else width
            shapes[self.name(f"layer{layer}.W")] = (fan_in, cfg.hidden_dim)
            if cfg.layer_kind is LayerKind.GAT:
                shapes[self.name(f"layer{layer}.a")] = (2 * cfg.hidden_dim, 1)
            width = cfg.hidden_dim
        shapes[self.name("head.W")] = (cfg.hidden_dim, cfg.num_scene_classes)
        shapes[self.name("head.b")] = (1, cfg.num_scene_classes)
        return shapes

    @classmethod
    def name(cls, suffix: str) -> str:
        return cls.PREFIX + suffix

    def forward(self, batch: GraphBatch) -> GnnOutput:
        cfg = self.config
        if batch.features.shape[1] != cfg.in_dim:
            raise ContractError(
                f"graph has {batch.features.shape[1]} classes, model expects {cfg.in_dim}"
            )
        dtype = self.params.precision.dtype
        h = constant(batch.features.astype(dtype))
        attention: List[np.ndarray] = []
        for layer in range(NUM_LAYERS):
            act = cfg.activation if layer < NUM_LAYERS - 1 else ActivationKind.IDENTITY
            w = self.params.var(self.name(f"layer{layer}.W"))
            if cfg.layer_kind is LayerKind.GCN:
                h = gcn_layer(h, batch.normalized_adjacency(), w, act)
            elif cfg.layer_kind is LayerKind.SAGE:
                h = sage_layer(h, batch.adjacency, w, act)
            else:
                a = self.params.var(self.name(f"layer{layer}.a"))
                h, alpha = gat_layer(h, batch.adjacency, w, a, cfg.gat_slope, act, cfg.gat_include_self)
                attention.append(alpha)
        pooled = readout(h, batch.ranges, cfg.readout)
        logits = add(
            matmul(pooled, self.params.var(self.name("head.W"))),
            self.params.var(self.name("head.b")),
        )
        return GnnOutput(h, pooled, logits, attention)


def gnn_classify(graph: SceneGraph, model: GnnModel) -> Tensor2D:
    """Logits (1 x num_scene_classes) for one scene graph."""
    if graph.num_classes != model.config.in_dim:
        raise ContractError(
            f"graph has {graph.num_classes} classes, model expects {model.config.in_dim}"
        )
    return model.forward(GraphBatch.from_graphs([graph])).logits.tensor()


def gnn_embed(graph: SceneGraph, model: GnnModel) -> Tensor2D:
    """Pre-head graph embedding (1 x hidden_dim)."""
    return model.forward(GraphBatch.from_graphs([graph])).graph_embeddings.tensor()


__all__ = [
    "NUM_LAYERS",
    "GnnConfig",
    "GnnModel",
    "GnnOutput",
    "GraphBatch",
    "LayerKind",
    "NormalizedAdjacency",
    "Readout",
    "gat_layer",
    "gcn_layer",
    "gnn_classify",
    "gnn_embed",
    "mean_neighbor_matrix",
    "normalize_adjacency",
    "readout",
    "sage_layer",
]
