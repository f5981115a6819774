"""
Scene Fusion - Checkpoint files.

Layout (little-endian):
    magic "TSCK" | u32 version
    | u32 config length | config JSON (UTF-8, sorted keys)
    | u32 tensor count
    | per tensor: u16 name length | name (UTF-8) | u64 payload length | TSG1 tensor
    | 32-byte SHA-256 of everything before it
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

from scene_fusion.errors import CheckpointError, ParseError
from scene_fusion.params import ParamStore
from scene_fusion.tensor import Precision, Tensor2D

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

CHECKPOINT_MAGIC = b"TSCK"
CHECKPOINT_VERSION = 1
_DIGEST_SIZE = 32


@dataclass
class Checkpoint:
    config: Dict[str, Any] = field(default_factory=dict)
    tensors: Dict[str, Tensor2D] = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION

    @classmethod
    def from_params(cls, params: ParamStore, config: Optional[Mapping[str, Any]] = None) -> Checkpoint:
        return cls(dict(config or {}), params.snapshot())

    def namespace(self, prefix: str) -> Dict[str, Tensor2D]:
        """Tensors whose names start with prefix; refuses an empty namespace."""
        found = {name: t for name, t in self.tensors.items() if name.startswith(prefix)}
        if not found:
            raise CheckpointError(f"checkpoint has no tensors under {prefix!r}")
        return found

    def to_store(self, prefix: str = "", precision: Optional[Precision] = None) -> ParamStore:
        tensors = self.namespace(prefix) if prefix else self.tensors
        if precision is None:
            precision = next(iter(tensors.values())).precision if tensors else Precision.DEFAULT
        store = ParamStore(precision)
        for name, tensor in tensors.items():
            store.add(name, tensor)
        return store


def checkpoint_to_bytes(checkpoint: Checkpoint) -> bytes:
    config = json.dumps(checkpoint.config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [
        CHECKPOINT_MAGIC,
        struct.pack("<I", checkpoint.version),
        struct.pack("<I", len(config)),
        config,
        struct.pack("<I", len(checkpoint.tensors)),
    ]
    for name in sorted(checkpoint.tensors):
        encoded = name.encode("utf-8")
        payload = checkpoint.tensors[name].to_bytes()
        parts += [struct.pack("<H", len(encoded)), encoded, struct.pack("<Q", len(payload)), payload]
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


class _Reader:
    def __init__(self, payload: bytes):
        self.payload = payload
        self.offset = 0

    def take(self, size: int, what: str) -> bytes:
        end = self.offset + size
        if end > len(self.payload):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        chunk = self.payload[self.offset : end]
        self.offset = end
        return chunk

    def unpack(self, fmt: str, what: str) -> int:
        return int(struct.unpack(fmt, self.take(struct.calcsize(fmt), what))[0])


def checkpoint_from_bytes(data: bytes) -> Checkpoint:
    if len(data) < len(CHECKPOINT_MAGIC) + 4 + _DIGEST_SIZE:
        raise CheckpointError("truncated checkpoint")
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {data[:4]!r}")
    body, digest = data[:-_DIGEST_SIZE], data[-_DIGEST_SIZE:]
    reader = _Reader(body)
    reader.take(4, "magic")
    version = reader.unpack("<I", "version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint checksum mismatch")

    config_len = reader.unpack("<I", "config length")
    try:
        config = json.loads(reader.take(config_len, "config").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable config snapshot: {exc}") from exc
    count = reader.unpack("<I", "tensor count")
    tensors: Dict[str, Tensor2D] = {}
    for _ in range(count):
        name = reader.take(reader.unpack("<H", "name length"), "name").decode("utf-8")
        payload = reader.take(reader.unpack("<Q", "payload length"), f"tensor {name!r}")
        try:
            tensor, end = Tensor2D.from_bytes(payload)
        except ParseError as exc:
            raise CheckpointError(f"tensor {name!r}: {exc}") from exc
        if end != len(payload):
            raise CheckpointError(f"tensor {name!r} has trailing bytes")
        if name in tensors:
            raise CheckpointError(f"duplicate tensor {name!r}")
        tensors[name] = tensor
    if reader.offset != len(body):
        raise CheckpointError("trailing bytes after tensor table")
    return Checkpoint(config, tensors, version)


def save_checkpoint(checkpoint: Checkpoint, path: PathLike) -> Path:
    """Write atomically (temp file, then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_to_bytes(checkpoint))
    os.replace(tmp, path)
    logger.info("saved checkpoint %s (%d tensors)", path, len(checkpoint.tensors))
    return path


def load_checkpoint(path: PathLike) -> Checkpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    checkpoint = checkpoint_from_bytes(data)
    logger.debug("loaded checkpoint %s (%d tensors)", path, len(checkpoint.tensors))
    return checkpoint


__all__ = [
    "CHECKPOINT_MAGIC",
    "CHECKPOINT_VERSION",
    "Checkpoint",
    "checkpoint_from_bytes",
    "checkpoint_to_bytes",
    "load_checkpoint",
    "save_checkpoint",
]
