"""
Scene Fusion - Scene graph extraction from semantic label maps.

A label map assigns every pixel an object-class index. Regions of the map
become graph nodes (one-hot class features) and two nodes are joined when a
pixel of one neighbours a pixel of the other. Boundaries are found by scanning
the map row by row and column by column (plus both diagonals under
8-connectivity).

Two independent paths compute the same edge set:
1. extract_regions + extract_adjacency: scipy labeling and vectorized scans
2. brute_force_adjacency_oracle: flood fill and pixel-pair enumeration

Both order nodes by the raster position of their first pixel.
"""

from __future__ import annotations

import json
import logging
from collections import Counter, deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, FrozenSet, List, Optional, Sequence, Set, Tuple

import numpy as np
from scipy import ndimage

from scene_fusion.errors import ConfigError, DataError, ParseError

logger = logging.getLogger(__name__)

Edge = Tuple[int, int]


class NodeMode(Enum):
    """Granularity of graph nodes."""

    COMPONENT = "component"  # one node per connected same-class region
    CLASS = "class"  # one node per class present


@dataclass(frozen=True)
class Pixel:
    """A pixel position on a label map."""

    row: int
    col: int

    def __add__(self, other: Pixel) -> Pixel:
        return Pixel(self.row + other.row, self.col + other.col)

    def neighbors(self, height: int, width: int, connectivity: int = 4) -> List[Pixel]:
        """Valid neighbouring positions (4- or 8-directional)."""
        deltas = _DELTAS_8 if connectivity == 8 else _DELTAS_4
        neighbors = []
        for delta in deltas:
            pos = self + delta
            if 0 <= pos.row < height and 0 <= pos.col < width:
                neighbors.append(pos)
        return neighbors


_DELTAS_4 = [Pixel(-1, 0), Pixel(0, -1), Pixel(0, 1), Pixel(1, 0)]
_DELTAS_8 = [
    Pixel(-1, -1),
    Pixel(-1, 0),
    Pixel(-1, 1),
    Pixel(0, -1),
    Pixel(0, 1),
    Pixel(1, -1),
    Pixel(1, 0),
    Pixel(1, 1),
]


# =============================================================================
# Label maps
# =============================================================================


@dataclass(frozen=True, eq=False)
class LabelMap:
    """H x W raster of class indices in [0, num_classes)."""

    pixels: np.ndarray
    num_classes: int

    def __post_init__(self) -> None:
        array = np.asarray(self.pixels)
        if array.ndim != 2 or array.size == 0:
            raise DataError(f"label map must be a non-empty 2-D raster, got {array.shape}")
        if not np.issubdtype(array.dtype, np.integer):
            raise DataError(f"label map needs integer class indices, got {array.dtype}")
        if self.num_classes < 1:
            raise DataError(f"num_classes must be positive, got {self.num_classes}")
        low, high = int(array.min()), int(array.max())
        if low < 0 or high >= self.num_classes:
            raise DataError(
                f"class index outside [0, {self.num_classes}): found {low}..{high}"
            )
        array = array.astype(np.int32, copy=True)
        array.setflags(write=False)
        object.__setattr__(self, "pixels", array)

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    @classmethod
    def from_rows(cls, rows: Sequence[Sequence[int]], num_classes: Optional[int] = None) -> LabelMap:
        array = np.array(rows, dtype=np.int32)
        if num_classes is None:
            num_classes = int(array.max()) + 1 if array.size else 1
        return cls(array, num_classes)

    def classes_present(self) -> List[int]:
        return [int(c) for c in np.unique(self.pixels)]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, LabelMap):
            return NotImplemented
        return self.num_classes == other.num_classes and np.array_equal(
            self.pixels, other.pixels
        )

    def __hash__(self) -> int:
        return hash((self.num_classes, self.pixels.shape, self.pixels.tobytes()))


@dataclass
class ExtractionOptions:
    """How regions and adjacencies are read off a label map."""

    connectivity: int = 4
    node_mode: NodeMode = NodeMode.COMPONENT
    min_region_pixels: int = 0

    def __post_init__(self) -> None:
        if isinstance(self.node_mode, str):
            self.node_mode = NodeMode(self.node_mode)

    def validate(self) -> None:
        if self.connectivity not in (4, 8):
            raise ConfigError(f"connectivity must be 4 or 8, got {self.connectivity}")
        if self.min_region_pixels < 0:
            raise ConfigError(
                f"min_region_pixels must be non-negative, got {self.min_region_pixels}"
            )


@dataclass(frozen=True, eq=False)
class Region:
    """A set of pixels that becomes one graph node."""

    region_id: int
    class_id: int
    pixel_count: int
    members: np.ndarray  # flat raster indices, ascending

    @property
    def first_pixel(self) -> int:
        return int(self.members[0])


# =============================================================================
# Scene graphs
# =============================================================================


@dataclass(frozen=True)
class SceneNode:
    node_id: int
    class_id: int
    pixel_count: int


@dataclass(frozen=True)
class SceneGraph:
    """Nodes with one-hot class features and an undirected edge set."""

    num_classes: int
    nodes: Tuple[SceneNode, ...]
    edges: FrozenSet[Edge] = field(default_factory=frozenset)

    def __post_init__(self) -> None:
        object.__setattr__(self, "nodes", tuple(self.nodes))
        normalized = set()
        for a, b in self.edges:
            if a == b:
                raise DataError(f"self-edge on node {a}")
            normalized.add((min(a, b), max(a, b)))
        object.__setattr__(self, "edges", frozenset(normalized))
        for expected, node in enumerate(self.nodes):
            if node.node_id != expected:
                raise DataError(f"node ids must be 0..n-1, found {node.node_id} at {expected}")
            if not 0 <= node.class_id < self.num_classes:
                raise DataError(f"node {expected} class {node.class_id} outside [0, {self.num_classes})")
        n = len(self.nodes)
        for a, b in self.edges:
            if a < 0 or b >= n:
                raise DataError(f"edge ({a}, {b}) references a missing node")

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    def features(self, dtype: np.dtype = np.dtype(np.float64)) -> np.ndarray:
        """n x C one-hot matrix, row i = e_{class of node i}."""
        out = np.zeros((self.num_nodes, self.num_classes), dtype=dtype)
        for node in self.nodes:
            out[node.node_id, node.class_id] = 1.0
        return out

    def sorted_edges(self) -> List[Edge]:
        return sorted(self.edges)

    def neighbor_lists(self) -> List[List[int]]:
        lists: List[List[int]] = [[] for _ in range(self.num_nodes)]
        for a, b in self.sorted_edges():
            lists[a].append(b)
            lists[b].append(a)
        return [sorted(x) for x in lists]

    def adjacency(self) -> np.ndarray:
        """Dense boolean adjacency without self loops."""
        adj = np.zeros((self.num_nodes, self.num_nodes), dtype=bool)
        for a, b in self.edges:
            adj[a, b] = adj[b, a] = True
        return adj

    def permuted(self, order: Sequence[int]) -> SceneGraph:
        """Relabel nodes so new node i is old node order[i]."""
        position = {old: new for new, old in enumerate(order)}
        nodes = tuple(
            SceneNode(new, self.nodes[old].class_id, self.nodes[old].pixel_count)
            for new, old in enumerate(order)
        )
        edges = frozenset((position[a], position[b]) for a, b in self.edges)
        return SceneGraph(self.num_classes, nodes, edges)

    def class_pairs(self) -> Counter:
        """Multiset of unordered class pairs over edges."""
        pairs: Counter = Counter()
        for a, b in self.edges:
            ca, cb = self.nodes[a].class_id, self.nodes[b].class_id
            pairs[(min(ca, cb), max(ca, cb))] += 1
        return pairs

    def has_class_adjacency(self, class_a: int, class_b: int) -> bool:
        key = (min(class_a, class_b), max(class_a, class_b))
        return self.class_pairs()[key] > 0

    def summary(self) -> Dict[str, object]:
        histogram = Counter(node.class_id for node in self.nodes)
        return {
            "nodes": self.num_nodes,
            "edges": len(self.edges),
            "classes": {str(c): histogram[c] for c in sorted(histogram)},
        }


# =============================================================================
# Fast extraction
# =============================================================================


def _structure(connectivity: int) -> np.ndarray:
    return ndimage.generate_binary_structure(2, 2 if connectivity == 8 else 1)


def extract_regions(label_map: LabelMap, opts: Optional[ExtractionOptions] = None) -> List[Region]:
    """Split a label map into regions ordered by first pixel in raster order."""
    opts = opts or ExtractionOptions()
    opts.validate()
    flat = label_map.pixels.ravel()
    candidates: List[Tuple[int, int, np.ndarray]] = []

    if opts.node_mode is NodeMode.CLASS:
        for class_id in label_map.classes_present():
            members = np.flatnonzero(flat == class_id)
            candidates.append((int(members[0]), class_id, members))
    else:
        structure = _structure(opts.connectivity)
        for class_id in label_map.classes_present():
            labeled, count = ndimage.label(label_map.pixels == class_id, structure=structure)
            labeled_flat = labeled.ravel()
            order = np.argsort(labeled_flat, kind="stable")
            sorted_labels = labeled_flat[order]
            starts = np.searchsorted(sorted_labels, np.arange(1, count + 2))
            for k in range(count):
                members = order[starts[k] : starts[k + 1]]
                candidates.append((int(members[0]), class_id, members))

    candidates.sort(key=lambda c: c[0])
    regions = []
    for first, class_id, members in candidates:
        if members.size < opts.min_region_pixels:
            continue
        regions.append(Region(len(regions), class_id, int(members.size), members))
    logger.debug(
        "extracted %d regions (%s, %d-conn) from %dx%d map",
        len(regions),
        opts.node_mode.value,
        opts.connectivity,
        label_map.height,
        label_map.width,
    )
    return regions


def region_raster(label_map: LabelMap, regions: Sequence[Region]) -> np.ndarray:
    """H x W map of region ids; pixels of dropped regions are -1."""
    raster = np.full(label_map.height * label_map.width, -1, dtype=np.int64)
    for region in regions:
        raster[region.members] = region.region_id
    return raster.reshape(label_map.height, label_map.width)


def extract_adjacency(
    label_map: LabelMap, regions: Sequence[Region], opts: Optional[ExtractionOptions] = None
) -> FrozenSet[Edge]:
    """Unordered region pairs that share a pixel boundary."""
    opts = opts or ExtractionOptions()
    opts.validate()
    raster = region_raster(label_map, regions)

    # Rows, then columns, then both diagonals for 8-connectivity
    scans = [
        (raster[:, :-1], raster[:, 1:]),
        (raster[:-1, :], raster[1:, :]),
    ]
    if opts.connectivity == 8:
        scans.append((raster[:-1, :-1], raster[1:, 1:]))
        scans.append((raster[:-1, 1:], raster[1:, :-1]))

    found: List[np.ndarray] = []
    for left, right in scans:
        a, b = left.ravel(), right.ravel()
        boundary = (a != b) & (a >= 0) & (b >= 0)
        if np.any(boundary):
            pairs = np.stack([np.minimum(a[boundary], b[boundary]), np.maximum(a[boundary], b[boundary])], axis=1)
            found.append(pairs)
    if not found:
        return frozenset()
    unique = np.unique(np.vstack(found), axis=0)
    return frozenset((int(a), int(b)) for a, b in unique)


def build_scene_graph(label_map: LabelMap, opts: Optional[ExtractionOptions] = None) -> SceneGraph:
    """Regions become one-hot nodes; boundary contacts become edges."""
    opts = opts or ExtractionOptions()
    regions = extract_regions(label_map, opts)
    if not regions:
        raise DataError("label map yields no regions (all below min_region_pixels)")
    edges = extract_adjacency(label_map, regions, opts)
    nodes = tuple(SceneNode(r.region_id, r.class_id, r.pixel_count) for r in regions)
    return SceneGraph(label_map.num_classes, nodes, edges)


# =============================================================================
# Brute-force oracle
# =============================================================================


def _flood_fill_regions(label_map: LabelMap, opts: ExtractionOptions) -> np.ndarray:
    height, width = label_map.height, label_map.width
    pixels = label_map.pixels
    owner = [[-1] * width for _ in range(height)]
    seeds: List[Tuple[int, int, List[Pixel]]] = []
    class_seed: Dict[int, int] = {}

    for r in range(height):
        for c in range(width):
            if owner[r][c] != -1:
                continue
            class_id = int(pixels[r, c])
            if opts.node_mode is NodeMode.CLASS:
                if class_id in class_seed:
                    owner[r][c] = class_seed[class_id]
                    seeds[class_seed[class_id]][2].append(Pixel(r, c))
                    continue
                class_seed[class_id] = len(seeds)
                owner[r][c] = len(seeds)
                seeds.append((r * width + c, class_id, [Pixel(r, c)]))
                continue
            index = len(seeds)
            members = [Pixel(r, c)]
            owner[r][c] = index
            queue = deque([Pixel(r, c)])
            while queue:
                pos = queue.popleft()
                for nb in pos.neighbors(height, width, opts.connectivity):
                    if owner[nb.row][nb.col] == -1 and int(pixels[nb.row, nb.col]) == class_id:
                        owner[nb.row][nb.col] = index
                        members.append(nb)
                        queue.append(nb)
            seeds.append((r * width + c, class_id, members))

    # Seeds are discovered in raster order, so ids already follow first pixels
    kept: Dict[int, int] = {}
    for index, (_, _, members) in enumerate(seeds):
        if len(members) >= opts.min_region_pixels:
            kept[index] = len(kept)
    return np.array(
        [[kept.get(owner[r][c], -1) for c in range(width)] for r in range(height)],
        dtype=np.int64,
    )


def brute_force_adjacency_oracle(
    label_map: LabelMap, opts: Optional[ExtractionOptions] = None
) -> FrozenSet[Edge]:
    """Edge set from flood fill and enumeration of every neighbouring pixel pair."""
    opts = opts or ExtractionOptions()
    opts.validate()
    owner = _flood_fill_regions(label_map, opts)
    height, width = label_map.height, label_map.width
    edges: Set[Edge] = set()
    for r in range(height):
        for c in range(width):
            a = int(owner[r, c])
            if a < 0:
                continue
            for nb in Pixel(r, c).neighbors(height, width, opts.connectivity):
                b = int(owner[nb.row, nb.col])
                if b >= 0 and b != a:
                    edges.add((min(a, b), max(a, b)))
    return frozenset(edges)


# =============================================================================
# JSON documents
# =============================================================================


def scene_graph_to_json(graph: SceneGraph) -> str:
    """Compact JSON document with edges sorted (a < b, lexicographic)."""
    document = {
        "num_classes": graph.num_classes,
        "nodes": [
            {"id": n.node_id, "class": n.class_id, "pixels": n.pixel_count} for n in graph.nodes
        ],
        "edges": [[a, b] for a, b in graph.sorted_edges()],
    }
    return json.dumps(document, separators=(",", ":"))


def _field(obj: Dict[str, object], key: str, context: str) -> int:
    if not isinstance(obj, dict) or key not in obj:
        raise ParseError(f"missing field {key!r}", context)
    value = obj[key]
    if isinstance(value, bool) or not isinstance(value, int):
        raise ParseError(f"field {key!r} must be an integer", context)
    return value


def scene_graph_from_json(text: str) -> SceneGraph:
    """Parse a graph document; every defect is reported with its location."""
    try:
        document = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, f"line {exc.lineno}, column {exc.colno}") from exc
    if not isinstance(document, dict):
        raise ParseError("graph document must be a JSON object", "root")
    num_classes = _field(document, "num_classes", "root")
    raw_nodes = document.get("nodes")
    raw_edges = document.get("edges")
    if not isinstance(raw_nodes, list):
        raise ParseError("field 'nodes' must be a list", "root")
    if not isinstance(raw_edges, list):
        raise ParseError("field 'edges' must be a list", "root")
    unknown = set(document) - {"num_classes", "nodes", "edges"}
    if unknown:
        raise ParseError(f"unknown fields {sorted(unknown)}", "root")

    nodes = []
    for i, raw in enumerate(raw_nodes):
        context = f"nodes[{i}]"
        nodes.append(
            SceneNode(
                _field(raw, "id", context),
                _field(raw, "class", context),
                _field(raw, "pixels", context),
            )
        )

    edges: Set[Edge] = set()
    for i, raw in enumerate(raw_edges):
        context = f"edges[{i}]"
        if (
            not isinstance(raw, list)
            or len(raw) != 2
            or not all(isinstance(v, int) and not isinstance(v, bool) for v in raw)
        ):
            raise ParseError("edge must be a pair of integers", context)
        a, b = raw
        if a == b:
            raise ParseError(f"self-edge on node {a}", context)
        key = (min(a, b), max(a, b))
        if key in edges:
            raise ParseError(f"duplicate edge {list(key)}", context)
        edges.add(key)

    try:
        return SceneGraph(num_classes, tuple(nodes), frozenset(edges))
    except DataError as exc:
        raise ParseError(str(exc), "graph invariants") from exc


# =============================================================================
# Structure-preserving transforms
# =============================================================================


def upscale_nearest(label_map: LabelMap, factor: int) -> LabelMap:
    """Integer nearest-neighbour upscaling."""
    if factor < 1:
        raise ConfigError(f"upscale factor must be >= 1, got {factor}")
    pixels = np.repeat(np.repeat(label_map.pixels, factor, axis=0), factor, axis=1)
    return LabelMap(pixels, label_map.num_classes)


def rotate90(label_map: LabelMap, k: int = 1) -> LabelMap:
    """Rotate by k quarter turns counter-clockwise."""
    return LabelMap(np.rot90(label_map.pixels, k), label_map.num_classes)


def pad_border(label_map: LabelMap, class_id: int) -> LabelMap:
    """Surround the map with a one-pixel border of `class_id`."""
    num_classes = max(label_map.num_classes, class_id + 1)
    pixels = np.pad(label_map.pixels, 1, mode="constant", constant_values=class_id)
    return LabelMap(pixels, num_classes)


__all__ = [
    "Edge",
    "ExtractionOptions",
    "LabelMap",
    "NodeMode",
    "Pixel",
    "Region",
    "SceneGraph",
    "SceneNode",
    "brute_force_adjacency_oracle",
    "build_scene_graph",
    "extract_adjacency",
    "extract_regions",
    "pad_border",
    "region_raster",
    "rotate90",
    "scene_graph_from_json",
    "scene_graph_to_json",
    "upscale_nearest",
]
