"""Checkpoint container.

Layout (all integers little-endian)::

    b"DCLC"                       magic
    u32 version
    u32 tensor_count
    per tensor:
        u32 name_len, UTF-8 name
        u32 rank, rank x u32 dims
        f32 data, row-major
    u64 metadata_len, UTF-8 JSON metadata

Metadata is written as compact, key-sorted JSON so read -> write reproduces the bytes.
"""

import json
import logging
import os
import struct
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from app.backend.core.arch import parse_arch, render_arch
from app.backend.core.errors import BadMagic, CorruptFile, TruncatedFile
from app.backend.core.layers import INIT_SCHEME
from app.backend.core.network import Network
from app.backend.core.schemas import DclOverrides

logger = logging.getLogger(__name__)

MAGIC = b"DCLC"
VERSION = 1


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray] = field(default_factory=dict)   # insertion order is file order
    metadata: dict[str, Any] = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        parts = [MAGIC, struct.pack("<II", VERSION, len(self.tensors))]
        for name, tensor in self.tensors.items():
            encoded = name.encode("utf-8")
            data = np.ascontiguousarray(tensor, dtype="<f4")
            parts.append(struct.pack("<I", len(encoded)))
            parts.append(encoded)
            parts.append(struct.pack(f"<I{data.ndim}I", data.ndim, *data.shape))
            parts.append(data.tobytes(order="C"))
        meta = json.dumps(self.metadata, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
        parts.append(struct.pack("<Q", len(meta)))
        parts.append(meta)
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Checkpoint":
        if len(raw) < 4:
            raise TruncatedFile("checkpoint shorter than its magic")
        if raw[:4] != MAGIC:
            raise BadMagic(f"expected {MAGIC!r}, found {raw[:4]!r}")
        reader = _Reader(raw, 4)
        version, count = reader.unpack("<II")
        if version != VERSION:
            raise BadMagic(f"unsupported checkpoint version {version}")

        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = reader.unpack("<I")
            try:
                name = reader.take(name_len).decode("utf-8")
            except UnicodeDecodeError as e:
                raise CorruptFile(f"tensor name is not UTF-8: {e}") from e
            if name in tensors:
                raise CorruptFile(f"duplicate tensor name {name!r} in checkpoint")
            (rank,) = reader.unpack("<I")
            dims = reader.unpack(f"<{rank}I") if rank else ()
            size = int(np.prod(dims, dtype=np.int64)) if rank else 1
            data = np.frombuffer(reader.take(4 * size), dtype="<f4").reshape(dims)
            tensors[name] = data.astype(np.float32)

        (meta_len,) = reader.unpack("<Q")
        try:
            metadata = json.loads(reader.take(meta_len).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CorruptFile(f"checkpoint metadata is not UTF-8 JSON: {e}") from e
        if not isinstance(metadata, dict):
            raise CorruptFile("checkpoint metadata must be a JSON object")
        if reader.offset != len(raw):
            raise TruncatedFile(f"{len(raw) - reader.offset} trailing bytes after metadata")
        return cls(tensors, metadata)


class _Reader:
    def __init__(self, raw: bytes, offset: int):
        self.raw = raw
        self.offset = offset

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.raw):
            raise TruncatedFile(f"checkpoint ends at byte {len(self.raw)}, needed {self.offset + n}")
        chunk = self.raw[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def write_checkpoint(path: str, checkpoint: Checkpoint) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as f:
        f.write(checkpoint.to_bytes())
    logger.info("checkpoint written: %s (%d tensors)", path, len(checkpoint.tensors))


def read_checkpoint(path: str) -> Checkpoint:
    # Явно проверяем, что файл существует, иначе будет понятная ошибка
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint not found: {path}. Train a model first or fix the path.")
    with open(path, "rb") as f:
        return Checkpoint.from_bytes(f.read())


def network_checkpoint(net: Network, metadata: dict[str, Any]) -> Checkpoint:
    """Snapshot of a Network's parameters plus arch/seed/init metadata.

    Pass ``arch`` (and ``dcl`` overrides) in metadata when the network was built
    from a string with JSON overrides; otherwise the canonical string is rendered.
    """
    meta: dict[str, Any] = {
        "input_shape": list(net.spec.input_shape),
        "num_classes": net.spec.num_classes,
        "seed": net.seed,
        "init": INIT_SCHEME,
    }
    meta.update(metadata)
    if "arch" not in meta:
        meta["arch"] = render_arch(net.spec)
    return Checkpoint(net.state_dict(), meta)


def restore_network(checkpoint: Checkpoint, precision: str = "single") -> Network:
    meta = checkpoint.metadata
    overrides = DclOverrides(**meta["dcl"]) if meta.get("dcl") else None
    spec = parse_arch(meta["arch"], tuple(meta["input_shape"]), int(meta["num_classes"]), overrides)
    net = Network(spec, precision=precision, seed=int(meta.get("seed", 0)))
    net.load_state_dict(checkpoint.tensors)
    return net
