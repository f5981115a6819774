"""
Scene Fusion - Raster file formats.

Label maps:
    .png   8-bit or 16-bit grayscale (or palette-index) PNG
    .pgm   binary PGM (P5), maxval <= 65535
    .lmap  raw: magic "LMAP" | u32 H | u32 W | u32 C | H*W u16 values (LE)

Images:
    .png / .jpg   8-bit gray or RGB, normalized to [0, 1]
    .imgt  raw: magic "IMGT" | u32 H | u32 W | u32 C | H*W*C f32 values (LE)
"""

from __future__ import annotations

import logging
import struct
from pathlib import Path
from typing import Optional, Union

import numpy as np
from PIL import Image, UnidentifiedImageError

from scene_fusion.errors import DataError, ParseError
from scene_fusion.scenegraph import LabelMap
from scene_fusion.vision import ImageTensor

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

LMAP_MAGIC = b"LMAP"
IMGT_MAGIC = b"IMGT"
_RAW_HEADER = struct.Struct("<4sIII")


# =============================================================================
# Label maps
# =============================================================================


def read_label_map(path: PathLike, num_classes: Optional[int] = None) -> LabelMap:
    """Read a label map; `num_classes` defaults to the stored C or max + 1."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".lmap":
        pixels, stored = _read_lmap(path)
        return LabelMap(pixels, num_classes if num_classes is not None else stored)
    pixels = _read_index_raster(path)
    if num_classes is None:
        num_classes = int(pixels.max()) + 1
    return LabelMap(pixels, num_classes)


def write_label_map(label_map: LabelMap, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    suffix = path.suffix.lower()
    pixels = label_map.pixels
    if suffix == ".lmap":
        header = _RAW_HEADER.pack(LMAP_MAGIC, label_map.height, label_map.width, label_map.num_classes)
        path.write_bytes(header + pixels.astype("<u2").tobytes())
    elif suffix in (".png", ".pgm"):
        if label_map.num_classes <= 256:
            Image.fromarray(pixels.astype(np.uint8)).save(path)
        elif suffix == ".png":
            Image.fromarray(pixels.astype(np.uint16)).save(path)
        else:
            _write_pgm16(pixels, path)
    else:
        raise DataError(f"unsupported label map format {suffix!r}: {path}")
    logger.debug("wrote label map %s (%dx%d)", path, label_map.height, label_map.width)
    return path


def _read_index_raster(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            if img.mode not in ("L", "P", "I", "I;16", "I;16B", "I;16L"):
                raise DataError(f"label map must be single-channel, got mode {img.mode}: {path}")
            pixels = np.array(img)
    except FileNotFoundError:
        raise DataError(f"label map not found: {path}") from None
    except UnidentifiedImageError as exc:
        raise ParseError(str(exc), str(path)) from exc
    if pixels.ndim != 2:
        raise DataError(f"label map must be 2-D, got shape {pixels.shape}: {path}")
    if pixels.min() < 0:
        raise DataError(f"negative class index in {path}")
    return pixels.astype(np.int64)


def _write_pgm16(pixels: np.ndarray, path: Path) -> None:
    height, width = pixels.shape
    header = f"P5\n{width} {height}\n65535\n".encode("ascii")
    path.write_bytes(header + pixels.astype(">u2").tobytes())


def _read_lmap(path: Path) -> tuple[np.ndarray, int]:
    payload = _read_bytes(path)
    if len(payload) < _RAW_HEADER.size:
        raise ParseError("truncated LMAP header", str(path))
    magic, height, width, classes = _RAW_HEADER.unpack_from(payload)
    if magic != LMAP_MAGIC:
        raise ParseError(f"bad magic {magic!r}", str(path))
    expected = _RAW_HEADER.size + 2 * height * width
    if len(payload) != expected:
        raise ParseError(f"expected {expected} bytes, found {len(payload)}", str(path))
    values = np.frombuffer(payload, dtype="<u2", offset=_RAW_HEADER.size)
    return values.reshape(height, width).astype(np.int64), classes


# =============================================================================
# Images
# =============================================================================


def read_image(path: PathLike) -> ImageTensor:
    path = Path(path)
    if path.suffix.lower() == ".imgt":
        return _read_imgt(path)
    try:
        with Image.open(path) as img:
            if img.mode not in ("L", "RGB"):
                img = img.convert("RGBA" if "A" in img.mode else "RGB").convert("RGB")
            pixels = np.array(img, dtype=np.float64) / 255.0
    except FileNotFoundError:
        raise DataError(f"image not found: {path}") from None
    except UnidentifiedImageError as exc:
        raise ParseError(str(exc), str(path)) from exc
    if pixels.ndim == 2:
        pixels = pixels[:, :, None]
    return ImageTensor(pixels)


def write_image(image: ImageTensor, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix.lower() == ".imgt":
        header = _RAW_HEADER.pack(IMGT_MAGIC, image.height, image.width, image.channels)
        path.write_bytes(header + image.pixels.astype("<f4").tobytes())
        return path
    quantized = np.rint(image.pixels * 255.0).astype(np.uint8)
    if image.channels == 1:
        Image.fromarray(quantized[:, :, 0]).save(path)
    else:
        Image.fromarray(quantized).save(path)
    return path


def _read_imgt(path: Path) -> ImageTensor:
    payload = _read_bytes(path)
    if len(payload) < _RAW_HEADER.size:
        raise ParseError("truncated IMGT header", str(path))
    magic, height, width, channels = _RAW_HEADER.unpack_from(payload)
    if magic != IMGT_MAGIC:
        raise ParseError(f"bad magic {magic!r}", str(path))
    expected = _RAW_HEADER.size + 4 * height * width * channels
    if len(payload) != expected:
        raise ParseError(f"expected {expected} bytes, found {len(payload)}", str(path))
    values = np.frombuffer(payload, dtype="<f4", offset=_RAW_HEADER.size)
    return ImageTensor(values.reshape(height, width, channels).astype(np.float64))


def _read_bytes(path: Path) -> bytes:
    try:
        return path.read_bytes()
    except FileNotFoundError:
        raise DataError(f"file not found: {path}") from None


__all__ = [
    "IMGT_MAGIC",
    "LMAP_MAGIC",
    "read_image",
    "read_label_map",
    "write_image",
    "write_label_map",
]
