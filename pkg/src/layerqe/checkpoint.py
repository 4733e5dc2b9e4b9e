"""Binary container for named parameter tensors.

Layout (all integers little-endian)::

    magic     4 bytes   b"LQCK"
    version   uint16
    meta_len  uint32
    meta      meta_len bytes of UTF-8 JSON (config block)
    count     uint32
    count x tensor:
        name_len uint16, name (UTF-8)
        ndim     uint8, dims uint32 x ndim
        data     float32 x prod(dims)

Model, adapter and head checkpoints all use this container; the ``meta`` block
says which one a file holds.
"""

from __future__ import annotations

import io
import json
import logging
import struct
from pathlib import Path
from typing import Any, Dict, Mapping, Tuple

import numpy as np

from layerqe.artifacts import atomic_write_bytes
from layerqe.errors import CheckpointError

_logger = logging.getLogger(__name__)

MAGIC = b"LQCK"
FORMAT_VERSION = 1
STORAGE_DTYPE = np.dtype("<f4")


def encode_tensors(tensors: Mapping[str, np.ndarray], meta: Mapping[str, Any]) -> bytes:
    buf = io.BytesIO()
    meta_bytes = json.dumps(dict(meta), sort_keys=True).encode("utf-8")
    buf.write(MAGIC)
    buf.write(struct.pack("<HI", FORMAT_VERSION, len(meta_bytes)))
    buf.write(meta_bytes)
    buf.write(struct.pack("<I", len(tensors)))
    for name, array in tensors.items():
        array = np.asarray(array)
        name_bytes = name.encode("utf-8")
        buf.write(struct.pack("<H", len(name_bytes)))
        buf.write(name_bytes)
        buf.write(struct.pack("<B", array.ndim))
        buf.write(struct.pack(f"<{array.ndim}I", *array.shape))
        buf.write(np.ascontiguousarray(array, dtype=STORAGE_DTYPE).tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes, source: str):
        self._data = data
        self._pos = 0
        self._source = source

    def take(self, n: int, what: str) -> bytes:
        end = self._pos + n
        if end > len(self._data):
            raise CheckpointError(f"{self._source}: truncated while reading {what}")
        chunk = self._data[self._pos : end]
        self._pos = end
        return chunk

    def unpack(self, fmt: str, what: str) -> Tuple[Any, ...]:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    @property
    def exhausted(self) -> bool:
        return self._pos == len(self._data)


def decode_tensors(data: bytes, source: str = "<bytes>") -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    reader = _Reader(data, source)
    if reader.take(4, "magic") != MAGIC:
        raise CheckpointError(f"{source}: not a layerqe checkpoint (bad magic)")
    version, meta_len = reader.unpack("<HI", "header")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    try:
        meta = json.loads(reader.take(meta_len, "config block").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{source}: corrupt config block") from exc
    (count,) = reader.unpack("<I", "tensor count")
    tensors: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H", "tensor name length")
        name = reader.take(name_len, "tensor name").decode("utf-8")
        (ndim,) = reader.unpack("<B", f"rank of {name}")
        shape = reader.unpack(f"<{ndim}I", f"shape of {name}")
        n = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        raw = reader.take(n * STORAGE_DTYPE.itemsize, f"data of {name}")
        tensors[name] = np.frombuffer(raw, dtype=STORAGE_DTYPE).reshape(shape).astype(np.float32)
    if not reader.exhausted:
        raise CheckpointError(f"{source}: trailing bytes after the last tensor")
    return meta, tensors


def save_tensors(path: Path, tensors: Mapping[str, np.ndarray], meta: Mapping[str, Any]) -> Path:
    written = atomic_write_bytes(Path(path), encode_tensors(tensors, meta))
    _logger.info("Wrote checkpoint %s (%d tensors)", written, len(tensors))
    return written


def load_tensors(path: Path) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode_tensors(data, str(path))


def expect_kind(meta: Mapping[str, Any], kind: str, source: object) -> None:
    if meta.get("kind") != kind:
        raise CheckpointError(f"{source}: expected a {kind} checkpoint, found {meta.get('kind')!r}")
