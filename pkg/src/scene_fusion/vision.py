"""
Scene Fusion - Image representation stream.

A toy-scale patch transformer:
    patchify -> linear embed -> prepend cls token -> add learned positions
    -> depth x (pre-norm multi-head self-attention + residual,
                pre-norm MLP d -> 4d -> d + residual)
    -> final cls row -> linear head

Several images are encoded together by stacking their token rows; row-wise
layers see the whole stack, attention is computed per image.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from scene_fusion.autodiff import (
    ActivationKind,
    Var,
    activation,
    add,
    concat_cols,
    concat_rows,
    constant,
    layer_norm,
    matmul,
    rowwise_softmax,
    scale,
    slice_cols,
    slice_rows,
    take_rows,
)
from scene_fusion.errors import ConfigError, ContractError, DataError, DimensionError
from scene_fusion.params import InitScheme, ParamStore, ensure_params, init_params
from scene_fusion.tensor import Precision, Tensor2D

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class ImageTensor:
    """H x W x C image with values in [0, 1] (C is 1 or 3)."""

    pixels: np.ndarray

    def __post_init__(self) -> None:
        array = np.asarray(self.pixels, dtype=np.float64)
        if array.ndim == 2:
            array = array[:, :, None]
        if array.ndim != 3 or array.shape[0] < 1 or array.shape[1] < 1:
            raise DataError(f"image must be H x W x C, got shape {array.shape}")
        if array.shape[2] not in (1, 3):
            raise DataError(f"image must have 1 or 3 channels, got {array.shape[2]}")
        if not np.all(np.isfinite(array)) or array.min() < 0.0 or array.max() > 1.0:
            raise DataError("image values must lie in [0, 1]")
        array = np.array(array)
        array.setflags(write=False)
        object.__setattr__(self, "pixels", array)

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def channels(self) -> int:
        return int(self.pixels.shape[2])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ImageTensor):
            return NotImplemented
        return self.pixels.shape == other.pixels.shape and bool(
            np.array_equal(self.pixels, other.pixels)
        )

    __hash__ = None  # type: ignore[assignment]


def patchify(img: ImageTensor, patch_size: int) -> Tensor2D:
    """Split an image into raster-ordered patch tokens.

    Each token is the patch's channels one after another (channel-major), every
    channel block flattened row-major, so a token has P*P*C entries.
    """
    p = patch_size
    if p < 1:
        raise ContractError(f"patch size must be positive, got {p}")
    if img.height % p or img.width % p:
        raise DimensionError("patchify", (img.height, img.width), (p, p))
    rows, cols, c = img.height // p, img.width // p, img.channels
    blocks = img.pixels.reshape(rows, p, cols, p, c).transpose(0, 2, 4, 1, 3)
    return Tensor2D(blocks.reshape(rows * cols, c * p * p))


@dataclass
class VitConfig:
    patch_size: int = 4
    embed_dim: int = 64
    depth: int = 4
    num_heads: int = 4
    image_size: int = 32
    channels: int = 3
    num_scene_classes: int = 2
    mlp_ratio: int = 4
    ln_eps: float = 1e-5

    def validate(self) -> None:
        if min(self.patch_size, self.embed_dim, self.num_heads, self.image_size, self.mlp_ratio) < 1:
            raise ConfigError("vit sizes must be positive")
        if self.depth < 0:
            raise ConfigError(f"vit depth must be non-negative, got {self.depth}")
        if self.embed_dim % self.num_heads:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.image_size % self.patch_size:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.channels not in (1, 3):
            raise ConfigError(f"channels must be 1 or 3, got {self.channels}")
        if self.num_scene_classes < 2:
            raise ConfigError("vit needs at least two scene classes")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def tokens_per_image(self) -> int:
        return self.num_patches + 1


@dataclass
class VitOutput:
    tokens: Var  # (B * tokens_per_image) x d, per-image blocks, cls first
    cls: Var  # B x d
    logits: Var  # B x K
    token_ranges: List[Tuple[int, int]]
    attention: List[np.ndarray] = field(default_factory=list)  # per block: B x heads x T x T


class VitModel:
    PREFIX = "vit."

    def __init__(
        self,
        config: VitConfig,
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
                params.add(name, init_params(shape, _scheme_for(name), rng, 1.0, precision))
        else:
            ensure_params(params, self.parameter_shapes())
        self.params = params

    @classmethod
    def name(cls, suffix: str) -> str:
        return cls.PREFIX + suffix

    def parameter_shapes(self) -> Dict[str, Tuple[int, int]]:
        cfg = self.config
        d = cfg.embed_dim
        hidden = cfg.mlp_ratio * d
        shapes = {
            self.name("patch.W"): (cfg.channels * cfg.patch_size**2, d),
            self.name("patch.b"): (1, d),
            self.name("cls"): (1, d),
            self.name("pos"): (cfg.tokens_per_image, d),
        }
        for i in range(cfg.depth):
            block = f"block{i}."
            shapes.update(
                {
                    self.name(block + "ln1.gamma"): (1, d),
                    self.name(block + "ln1.beta"): (1, d),
                    self.name(block + "attn.Wq"): (d, d),
                    self.name(block + "attn.Wk"): (d, d),
                    self.name(block + "attn.Wv"): (d, d),
                    self.name(block + "attn.Wo"): (d, d),
                    self.name(block + "attn.bo"): (1, d),
                    self.name(block + "ln2.gamma"): (1, d),
                    self.name(block + "ln2.beta"): (1, d),
                    self.name(block + "mlp.W1"): (d, hidden),
                    self.name(block + "mlp.b1"): (1, hidden),
                    self.name(block + "mlp.W2"): (hidden, d),
                    self.name(block + "mlp.b2"): (1, d),
                }
            )
        shapes[self.name("head.W")] = (d, cfg.num_scene_classes)
        shapes[self.name("head.b")] = (1, cfg.num_scene_classes)
        return shapes

    def _p(self, suffix: str) -> Var:
        return self.params.var(self.name(suffix))

    # -------------------------------------------------------------------------
    # Forward
    # -------------------------------------------------------------------------

    def embed(self, images: Sequence[ImageTensor]) -> Tuple[Var, List[Tuple[int, int]]]:
        """Token rows of every image before the encoder blocks."""
        cfg = self.config
        if not images:
            raise ContractError("encode needs at least one image")
        dtype = self.params.precision.dtype
        patches = []
        for img in images:
            if img.channels != cfg.channels:
                raise DimensionError("vit channels", (cfg.channels,), (img.channels,))
            if (img.height, img.width) != (cfg.image_size, cfg.image_size):
                raise DimensionError(
                    "vit image size", (cfg.image_size, cfg.image_size), (img.height, img.width)
                )
            patches.append(patchify(img, cfg.patch_size).data)
        x = constant(np.vstack(patches).astype(dtype))
        embedded = add(matmul(x, self._p("patch.W")), self._p("patch.b"))

        n, t = cfg.num_patches, cfg.tokens_per_image
        stacked = concat_rows([self._p("cls"), embedded])
        order = np.concatenate([np.concatenate(([0], 1 + b * n + np.arange(n))) for b in range(len(images))])
        tokens = take_rows(stacked, order)
        positions = take_rows(self._p("pos"), np.tile(np.arange(t), len(images)))
        ranges = [(b * t, (b + 1) * t) for b in range(len(images))]
        return add(tokens, positions), ranges

    def _attention(
        self, x: Var, ranges: List[Tuple[int, int]], block: str
    ) -> Tuple[Var, np.ndarray]:
        cfg = self.config
        heads = cfg.num_heads
        dh = cfg.embed_dim // heads
        q = matmul(x, self._p(block + "attn.Wq"))
        k = matmul(x, self._p(block + "attn.Wk"))
        v = matmul(x, self._p(block + "attn.Wv"))
        inv_sqrt = 1.0 / math.sqrt(dh)
        outputs = []
        weights = []
        for start, stop in ranges:
            qi, ki, vi = (slice_rows(m, start, stop) for m in (q, k, v))
            per_head = []
            for h in range(heads):
                lo, hi = h * dh, (h + 1) * dh
                scores = scale(matmul(slice_cols(qi, lo, hi), slice_cols(ki, lo, hi).T), inv_sqrt)
                alpha = rowwise_softmax(scores)
                weights.append(alpha.value)
                per_head.append(matmul(alpha, slice_cols(vi, lo, hi)))
            outputs.append(concat_cols(per_head) if heads > 1 else per_head[0])
        merged = concat_rows(outputs) if len(outputs) > 1 else outputs[0]
        projected = add(matmul(merged, self._p(block + "attn.Wo")), self._p(block + "attn.bo"))
        t = ranges[0][1] - ranges[0][0]
        return projected, np.stack(weights).reshape(len(ranges), heads, t, t)

    def _mlp(self, x: Var, block: str) -> Var:
        hidden = activation(
            add(matmul(x, self._p(block + "mlp.W1")), self._p(block + "mlp.b1")),
            ActivationKind.GELU,
        )
        return add(matmul(hidden, self._p(block + "mlp.W2")), self._p(block + "mlp.b2"))

    def forward(self, images: Sequence[ImageTensor]) -> VitOutput:
        cfg = self.config
        x, ranges = self.embed(images)
        attention = []
        for i in range(cfg.depth):
            block = f"block{i}."
            normed = layer_norm(x, self._p(block + "ln1.gamma"), self._p(block + "ln1.beta"), cfg.ln_eps)
            attended, alpha = self._attention(normed, ranges, block)
            x = add(x, attended)
            normed = layer_norm(x, self._p(block + "ln2.gamma"), self._p(block + "ln2.beta"), cfg.ln_eps)
            x = add(x, self._mlp(normed, block))
            attention.append(alpha)
        cls = take_rows(x, [start for start, _ in ranges])
        logits = add(matmul(cls, self._p("head.W")), self._p("head.b"))
        return VitOutput(x, cls, logits, ranges, attention)


def _scheme_for(name: str) -> InitScheme:
    if name.endswith("gamma"):
        return InitScheme.CONSTANT
    if name.endswith((".b", ".beta", ".bo", ".b1", ".b2")):
        return InitScheme.ZEROS
    return InitScheme.XAVIER_UNIFORM


def encode(img: ImageTensor, model: VitModel) -> Tuple[Tensor2D, Tensor2D]:
    """(cls embedding 1 x d, all token rows T x d) for one image."""
    out = model.forward([img])
    return out.cls.tensor(), out.tokens.tensor()


def vit_classify(img: ImageTensor, model: VitModel) -> Tensor2D:
    return model.forward([img]).logits.tensor()


__all__ = [
    "ImageTensor",
    "VitConfig",
    "VitModel",
    "VitOutput",
    "encode",
    "patchify",
    "vit_classify",
]
