"""
Scene Fusion - Datasets: synthetic scene generator and manifest ingestion.

Synthetic scenes are stacks of axis-aligned rectangles and discs over a
background class (later shapes occlude earlier ones, no anti-aliasing). Each
label map is paired with an image painted from a per-class palette, a global
brightness offset and seeded noise. Scene labels follow one of four rules:

    motif          1 iff the extracted graph has an edge between the two
                   designated classes
    image_pattern  1 iff the image was drawn bright
    xor            motif XOR image_pattern (neither stream alone suffices)
    joint          2 * motif + image_pattern (K = 4)

On disk a dataset is a JSON manifest, PNG label maps and images, and a
labels CSV (sample_id, label). Splits are disjoint by sample id.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, TypeVar, Union

import numpy as np

from scene_fusion.errors import ConfigError, DataError, ParseError, SampleError
from scene_fusion.rasters import read_image, read_label_map, write_image, write_label_map
from scene_fusion.scenegraph import (
    ExtractionOptions,
    LabelMap,
    NodeMode,
    SceneGraph,
    build_scene_graph,
)
from scene_fusion.vision import ImageTensor

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
T = TypeVar("T")
R = TypeVar("R")

MANIFEST_FORMAT = "scene-fusion-manifest"
MANIFEST_VERSION = 1
THREADS_ENV = "TSG_THREADS"
EXTERNAL_PROVENANCE = "external"
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".imgt")


class LabelRule(Enum):
    MOTIF = "motif"
    IMAGE_PATTERN = "image_pattern"
    XOR = "xor"
    JOINT = "joint"

    @property
    def num_labels(self) -> int:
        return 4 if self is LabelRule.JOINT else 2


class Split(Enum):
    TRAIN = "train"
    TEST = "test"


class ShapeKind(Enum):
    RECTANGLE = "rectangle"
    DISC = "disc"


def threads_from_env() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        threads = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if threads < 1:
        raise ConfigError(f"{THREADS_ENV} must be at least 1, got {threads}")
    return threads


def ordered_map(fn: Callable[[T], R], items: Sequence[T], threads: Optional[int] = None) -> List[R]:
    """Map in a worker pool; results keep input order."""
    threads = threads or threads_from_env()
    if threads == 1 or len(items) < 2:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# =============================================================================
# Samples and datasets
# =============================================================================


@dataclass(eq=False)
class Sample:
    """One (label map, image, scene label) triple, loaded on first access."""

    sample_id: str
    label: int
    split: Split
    label_map_path: Optional[Path] = None
    image_path: Optional[Path] = None
    num_classes: Optional[int] = None
    _label_map: Optional[LabelMap] = field(default=None, repr=False)
    _image: Optional[ImageTensor] = field(default=None, repr=False)
    _graphs: Dict[Tuple[int, str, int], SceneGraph] = field(default_factory=dict, repr=False)

    @classmethod
    def in_memory(
        cls, sample_id: str, label: int, split: Split, label_map: LabelMap, image: ImageTensor
    ) -> Sample:
        return cls(sample_id, label, split, num_classes=label_map.num_classes, _label_map=label_map, _image=image)

    @property
    def resident(self) -> bool:
        """True once the label map or the image has been read into memory."""
        return self._label_map is not None or self._image is not None

    def _read_label_map(self) -> LabelMap:
        if self.label_map_path is None:
            raise SampleError(self.sample_id, "no label map")
        try:
            return read_label_map(self.label_map_path, self.num_classes)
        except SampleError:
            raise
        except DataError as exc:
            raise SampleError(self.sample_id, str(exc)) from exc

    def _read_image(self) -> ImageTensor:
        if self.image_path is None:
            raise SampleError(self.sample_id, "no image")
        try:
            return read_image(self.image_path)
        except DataError as exc:
            raise SampleError(self.sample_id, str(exc)) from exc

    @property
    def label_map(self) -> LabelMap:
        if self._label_map is None:
            self._label_map = self._read_label_map()
        return self._label_map

    @property
    def image(self) -> ImageTensor:
        if self._image is None:
            self._image = self._read_image()
        return self._image

    def graph(self, options: Optional[ExtractionOptions] = None) -> SceneGraph:
        options = options or ExtractionOptions()
        key = (options.connectivity, options.node_mode.value, options.min_region_pixels)
        if key not in self._graphs:
            try:
                self._graphs[key] = build_scene_graph(self.label_map, options)
            except SampleError:
                raise
            except DataError as exc:
                raise SampleError(self.sample_id, str(exc)) from exc
        return self._graphs[key]

    def validate(self, num_scene_classes: int) -> None:
        """Check the label range and raster shapes; rasters not yet resident are read and dropped."""
        if not 0 <= self.label < num_scene_classes:
            raise SampleError(self.sample_id, f"scene label {self.label} outside [0, {num_scene_classes})")
        label_map = self._label_map if self._label_map is not None else self._read_label_map()
        image = self._image if self._image is not None else self._read_image()
        if (label_map.height, label_map.width) != (image.height, image.width):
            raise SampleError(
                self.sample_id,
                f"image is {image.height}x{image.width} but label map is {label_map.height}x{label_map.width}",
            )


@dataclass(eq=False)
class Dataset:
    samples: List[Sample]
    num_classes: int
    num_scene_classes: int
    provenance: str = EXTERNAL_PROVENANCE
    options: ExtractionOptions = field(default_factory=ExtractionOptions)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[Sample]:
        return iter(self.samples)

    @property
    def train(self) -> List[Sample]:
        return [s for s in self.samples if s.split is Split.TRAIN]

    @property
    def test(self) -> List[Sample]:
        return [s for s in self.samples if s.split is Split.TEST]

    def split(self, name: Union[Split, str]) -> List[Sample]:
        return self.train if Split(name) is Split.TRAIN else self.test

    def by_id(self, sample_id: str) -> Sample:
        for sample in self.samples:
            if sample.sample_id == sample_id:
                return sample
        raise DataError(f"unknown sample id {sample_id!r}")

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        if not self.samples:
            raise DataError("dataset is empty")
        image = self.samples[0].image
        return image.height, image.width, image.channels

    def label_counts(self, split: Union[Split, str]) -> Dict[int, int]:
        counts = {k: 0 for k in range(self.num_scene_classes)}
        for sample in self.split(split):
            counts[sample.label] += 1
        return counts


# =============================================================================
# Manifest
# =============================================================================


@dataclass(frozen=True)
class ManifestEntry:
    sample_id: str
    label_map: str
    image: str
    label: int
    split: Split


@dataclass
class DatasetManifest:
    entries: List[ManifestEntry]
    num_classes: int
    num_scene_classes: int
    provenance: str = EXTERNAL_PROVENANCE
    root: Path = field(default_factory=Path)

    def to_json(self) -> str:
        document = {
            "format": MANIFEST_FORMAT,
            "version": MANIFEST_VERSION,
            "num_classes": self.num_classes,
            "num_scene_classes": self.num_scene_classes,
            "provenance": self.provenance,
            "samples": [
                {
                    "id": e.sample_id,
                    "label_map": e.label_map,
                    "image": e.image,
                    "label": e.label,
                    "split": e.split.value,
                }
                for e in self.entries
            ],
        }
        return json.dumps(document, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str, root: PathLike = ".") -> DatasetManifest:
        try:
            document = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ParseError(exc.msg, f"manifest line {exc.lineno} column {exc.colno}") from exc
        if not isinstance(document, dict) or document.get("format") != MANIFEST_FORMAT:
            raise ParseError("not a scene-fusion manifest", "format")
        if document.get("version") != MANIFEST_VERSION:
            raise ParseError(f"unsupported manifest version {document.get('version')!r}", "version")
        try:
            entries = []
            seen = set()
            for i, raw in enumerate(document["samples"]):
                entry = ManifestEntry(
                    str(raw["id"]), str(raw["label_map"]), str(raw["image"]), int(raw["label"]), Split(raw["split"])
                )
                if entry.sample_id in seen:
                    raise ParseError(f"duplicate sample id {entry.sample_id!r}", f"samples[{i}]")
                seen.add(entry.sample_id)
                entries.append(entry)
            manifest = cls(
                entries,
                int(document["num_classes"]),
                int(document["num_scene_classes"]),
                str(document.get("provenance", EXTERNAL_PROVENANCE)),
                Path(root),
            )
        except KeyError as exc:
            raise ParseError(f"missing field {exc.args[0]!r}", "manifest") from exc
        except (TypeError, ValueError) as exc:
            raise ParseError(str(exc), "manifest") from exc
        if manifest.num_classes < 1 or manifest.num_scene_classes < 2:
            raise ParseError("num_classes >= 1 and num_scene_classes >= 2 required", "manifest")
        return manifest

    def save(self, path: PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json(), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: PathLike) -> DatasetManifest:
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except FileNotFoundError:
            raise DataError(f"manifest not found: {path}") from None
        return cls.from_json(text, path.parent)

    def to_dataset(self, options: Optional[ExtractionOptions] = None) -> Dataset:
        samples = [
            Sample(
                e.sample_id,
                e.label,
                e.split,
                self.root / e.label_map,
                self.root / e.image,
                self.num_classes,
            )
            for e in self.entries
        ]
        return Dataset(
            samples, self.num_classes, self.num_scene_classes, self.provenance, options or ExtractionOptions()
        )


def write_labels_csv(samples: Sequence[Tuple[str, int]], path: PathLike) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["sample_id", "label"])
        writer.writerows(samples)
    return path


def load_dataset(
    manifest_path: PathLike,
    options: Optional[ExtractionOptions] = None,
    validate: bool = True,
    threads: Optional[int] = None,
) -> Dataset:
    """Load a manifest; with `validate`, every sample is read and checked."""
    manifest = DatasetManifest.load(manifest_path)
    dataset = manifest.to_dataset(options)
    if validate:
        for sample in dataset.samples:
            for path in (sample.label_map_path, sample.image_path):
                if path is not None and not path.exists():
                    raise SampleError(sample.sample_id, f"missing file {path}")
        ordered_map(lambda s: s.validate(dataset.num_scene_classes), dataset.samples, threads)
    logger.info(
        "loaded %d samples (%d train, %d test) from %s",
        len(dataset),
        len(dataset.train),
        len(dataset.test),
        manifest_path,
    )
    return dataset


def manifest_from_folder(
    folder: PathLike,
    num_classes: Optional[int] = None,
    write: bool = True,
) -> DatasetManifest:
    """Build a manifest for an ADE20K-style folder.

    Layout: annotations/<id>.png (class-index maps), images/<id>.<png|jpg>,
    scene_labels.csv with columns sample_id, label and optionally split.
    """
    root = Path(folder)
    labels_path = root / "scene_labels.csv"
    if not labels_path.exists():
        raise DataError(f"missing {labels_path}")
    rows = []
    with labels_path.open(newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames is None or not {"sample_id", "label"} <= set(reader.fieldnames):
            raise ParseError("scene_labels.csv needs sample_id and label columns", str(labels_path))
        for line, row in enumerate(reader, start=2):
            try:
                rows.append((row["sample_id"], int(row["label"]), Split(row.get("split") or "train")))
            except ValueError as exc:
                raise ParseError(str(exc), f"{labels_path} line {line}") from exc

    entries = []
    max_class = 0
    for sample_id, label, split in rows:
        map_path = root / "annotations" / f"{sample_id}.png"
        if not map_path.exists():
            raise SampleError(sample_id, f"missing annotation {map_path}")
        image_path = next(
            (root / "images" / f"{sample_id}{suffix}" for suffix in IMAGE_SUFFIXES
             if (root / "images" / f"{sample_id}{suffix}").exists()),
            None,
        )
        if image_path is None:
            raise SampleError(sample_id, "missing image")
        if num_classes is None:
            max_class = max(max_class, int(read_label_map(map_path).pixels.max()))
        entries.append(
            ManifestEntry(
                sample_id,
                map_path.relative_to(root).as_posix(),
                image_path.relative_to(root).as_posix(),
                label,
                split,
            )
        )
    if not entries:
        raise DataError(f"no samples listed in {labels_path}")
    manifest = DatasetManifest(
        entries,
        num_classes if num_classes is not None else max_class + 1,
        max(2, max(e.label for e in entries) + 1),
        EXTERNAL_PROVENANCE,
        root,
    )
    if write:
        manifest.save(root / "manifest.json")
    return manifest


# =============================================================================
# Synthetic generator
# =============================================================================


@dataclass
class SyntheticSpec:
    """Parameters of the synthetic scene generator."""

    height: int = 32
    width: int = 32
    num_object_classes: int = 6
    num_scene_classes: int = 2
    min_objects: int = 3
    max_objects: int = 6
    min_extent: int = 6
    max_extent: int = 16
    shape_kinds: Tuple[ShapeKind, ...] = (ShapeKind.RECTANGLE, ShapeKind.DISC)
    noise: float = 0.05
    palette_contrast: float = 1.0
    bright_offset: float = 0.4
    label_rule: LabelRule = LabelRule.MOTIF
    motif_pair: Tuple[int, int] = (1, 2)
    connectivity: int = 4
    background_class: int = 0
    channels: int = 3
    num_train: int = 200
    num_test: int = 50
    balance: bool = True
    max_attempts: int = 500
    seed: int = 0

    def __post_init__(self) -> None:
        self.label_rule = LabelRule(self.label_rule)
        self.shape_kinds = tuple(ShapeKind(k) for k in self.shape_kinds)
        self.motif_pair = (int(self.motif_pair[0]), int(self.motif_pair[1]))

    def validate(self) -> None:
        if self.height < 1 or self.width < 1:
            raise ConfigError("canvas must be at least 1x1")
        if self.num_object_classes < 3:
            raise ConfigError(f"num_object_classes must be >= 3, got {self.num_object_classes}")
        if self.num_scene_classes < 2:
            raise ConfigError(f"num_scene_classes must be >= 2, got {self.num_scene_classes}")
        if self.num_scene_classes != self.label_rule.num_labels:
            raise ConfigError(
                f"label rule {self.label_rule.value} yields {self.label_rule.num_labels} scene classes, "
                f"spec asks for {self.num_scene_classes}"
            )
        if self.min_objects < 1 or self.max_objects < self.min_objects:
            raise ConfigError("object count range must satisfy 1 <= min_objects <= max_objects")
        if self.min_extent < 1 or self.max_extent < self.min_extent:
            raise ConfigError("extent range must satisfy 1 <= min_extent <= max_extent")
        if not self.shape_kinds:
            raise ConfigError("at least one shape kind is required")
        a, b = self.motif_pair
        classes = range(self.num_object_classes)
        if a == b or a not in classes or b not in classes:
            raise ConfigError(f"motif_pair {self.motif_pair} must name two distinct classes")
        if self.background_class not in classes:
            raise ConfigError("background_class outside the class range")
        if self.connectivity not in (4, 8):
            raise ConfigError(f"connectivity must be 4 or 8, got {self.connectivity}")
        if self.channels not in (1, 3):
            raise ConfigError(f"channels must be 1 or 3, got {self.channels}")
        if self.noise < 0 or not 0 <= self.palette_contrast <= 1 or not 0 <= self.bright_offset <= 0.5:
            raise ConfigError("noise >= 0, palette_contrast in [0, 1], bright_offset in [0, 0.5]")
        if self.num_train < 0 or self.num_test < 0 or self.num_train + self.num_test < 1:
            raise ConfigError("at least one sample must be generated")
        if self.max_attempts < 1:
            raise ConfigError("max_attempts must be positive")

    def to_dict(self) -> Dict[str, object]:
        document = asdict(self)
        document["shape_kinds"] = [k.value for k in self.shape_kinds]
        document["label_rule"] = self.label_rule.value
        document["motif_pair"] = list(self.motif_pair)
        return document

    def spec_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return "sha256:" + hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    @property
    def extraction_options(self) -> ExtractionOptions:
        return ExtractionOptions(connectivity=self.connectivity, node_mode=NodeMode.COMPONENT)


@dataclass
class GeneratedSample:
    sample_id: str
    split: Split
    label: int
    motif: bool
    bright: bool
    label_map: LabelMap
    image: ImageTensor

    def to_sample(self) -> Sample:
        return Sample.in_memory(self.sample_id, self.label, self.split, self.label_map, self.image)


def scene_palette(spec: SyntheticSpec) -> np.ndarray:
    """num_object_classes x channels base colours in [0, 0.5]."""
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed).spawn(1)[0])
    raw = rng.random((spec.num_object_classes, spec.channels))
    return 0.25 + spec.palette_contrast * (raw - 0.5) * 0.5


def _draw_label_map(spec: SyntheticSpec, rng: np.random.Generator) -> LabelMap:
    h, w = spec.height, spec.width
    canvas = np.full((h, w), spec.background_class, dtype=np.int32)
    choices = [c for c in range(spec.num_object_classes) if c != spec.background_class]
    count = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    rows, cols = np.mgrid[0:h, 0:w]
    for _ in range(count):
        kind = spec.shape_kinds[int(rng.integers(len(spec.shape_kinds)))]
        class_id = choices[int(rng.integers(len(choices)))]
        if kind is ShapeKind.RECTANGLE:
            sh = min(int(rng.integers(spec.min_extent, spec.max_extent + 1)), h)
            sw = min(int(rng.integers(spec.min_extent, spec.max_extent + 1)), w)
            top = int(rng.integers(0, h - sh + 1))
            left = int(rng.integers(0, w - sw + 1))
            canvas[top : top + sh, left : left + sw] = class_id
        else:
            radius = int(rng.integers(max(1, spec.min_extent // 2), max(1, spec.max_extent // 2) + 1))
            cy, cx = int(rng.integers(0, h)), int(rng.integers(0, w))
            canvas[(rows - cy) ** 2 + (cols - cx) ** 2 <= radius * radius] = class_id
    return LabelMap(canvas, spec.num_object_classes)


def _paint_image(
    spec: SyntheticSpec, palette: np.ndarray, label_map: LabelMap, bright: bool, rng: np.random.Generator
) -> ImageTensor:
    base = palette[label_map.pixels]
    offset = spec.bright_offset if bright else 0.0
    noise = rng.normal(0.0, spec.noise, size=base.shape) if spec.noise > 0 else 0.0
    values = np.clip(base + offset + noise, 0.0, 1.0)
    # 8-bit grid, so a PNG round trip reproduces the in-memory image
    return ImageTensor(np.rint(values * 255.0) / 255.0)


def has_motif(label_map: LabelMap, spec: SyntheticSpec) -> bool:
    graph = build_scene_graph(label_map, spec.extraction_options)
    return graph.has_class_adjacency(*spec.motif_pair)


def scene_label(rule: LabelRule, motif: bool, bright: bool) -> int:
    if rule is LabelRule.MOTIF:
        return int(motif)
    if rule is LabelRule.IMAGE_PATTERN:
        return int(bright)
    if rule is LabelRule.XOR:
        return int(motif != bright)
    return 2 * int(motif) + int(bright)


def _targets(rule: LabelRule, target: int, bright: bool) -> Tuple[Optional[bool], bool]:
    """(required motif or None, brightness) producing `target` under `rule`."""
    if rule is LabelRule.MOTIF:
        return bool(target), bright
    if rule is LabelRule.IMAGE_PATTERN:
        return None, bool(target)
    if rule is LabelRule.XOR:
        return bool(target) != bright, bright
    return bool(target // 2), bool(target % 2)


def _generate_one(
    spec: SyntheticSpec, palette: np.ndarray, index: int, seed: np.random.SeedSequence
) -> GeneratedSample:
    rng = np.random.default_rng(seed)
    sample_id = f"s{index:05d}"
    split = Split.TRAIN if index < spec.num_train else Split.TEST
    bright = bool(rng.random() < 0.5)
    wanted: Optional[bool] = None
    if spec.balance:
        wanted, bright = _targets(spec.label_rule, index % spec.num_scene_classes, bright)
    for _ in range(spec.max_attempts):
        label_map = _draw_label_map(spec, rng)
        motif = has_motif(label_map, spec)
        if wanted is None or motif == wanted:
            break
    else:
        raise SampleError(sample_id, f"no scene matched the target label in {spec.max_attempts} attempts")
    image = _paint_image(spec, palette, label_map, bright, rng)
    label = scene_label(spec.label_rule, motif, bright)
    logger.debug("generated %s label=%d motif=%s bright=%s", sample_id, label, motif, bright)
    return GeneratedSample(sample_id, split, label, motif, bright, label_map, image)


def synthesize(spec: SyntheticSpec, threads: Optional[int] = None) -> List[GeneratedSample]:
    """Generate every sample in memory; per-sample seeds make order irrelevant."""
    spec.validate()
    total = spec.num_train + spec.num_test
    palette = scene_palette(spec)
    seeds = np.random.SeedSequence(spec.seed).spawn(total + 1)[1:]
    return ordered_map(
        lambda i: _generate_one(spec, palette, i, seeds[i]), list(range(total)), threads
    )


def synthetic_dataset(spec: SyntheticSpec, threads: Optional[int] = None) -> Dataset:
    generated = synthesize(spec, threads)
    return Dataset(
        [g.to_sample() for g in generated],
        spec.num_object_classes,
        spec.num_scene_classes,
        spec.spec_hash(),
        spec.extraction_options,
    )


def gen_synthetic(spec: SyntheticSpec, out_dir: PathLike, threads: Optional[int] = None) -> DatasetManifest:
    """Generate a dataset and write its manifest, rasters and labels CSV."""
    root = Path(out_dir)
    generated = synthesize(spec, threads)
    entries = []
    for g in generated:
        map_rel = f"maps/{g.sample_id}.png"
        image_rel = f"images/{g.sample_id}.png"
        write_label_map(g.label_map, root / map_rel)
        write_image(g.image, root / image_rel)
        entries.append(ManifestEntry(g.sample_id, map_rel, image_rel, g.label, g.split))
    manifest = DatasetManifest(entries, spec.num_object_classes, spec.num_scene_classes, spec.spec_hash(), root)
    manifest.save(root / "manifest.json")
    write_labels_csv([(g.sample_id, g.label) for g in generated], root / "labels.csv")
    counts = np.bincount([g.label for g in generated], minlength=spec.num_scene_classes)
    logger.info("generated %d samples into %s (labels %s)", len(generated), root, counts.tolist())
    return manifest


__all__ = [
    "Dataset",
    "DatasetManifest",
    "GeneratedSample",
    "LabelRule",
    "ManifestEntry",
    "Sample",
    "ShapeKind",
    "Split",
    "SyntheticSpec",
    "gen_synthetic",
    "has_motif",
    "load_dataset",
    "manifest_from_folder",
    "ordered_map",
    "scene_label",
    "scene_palette",
    "synthesize",
    "synthetic_dataset",
    "threads_from_env",
]
