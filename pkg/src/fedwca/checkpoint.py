"""FWCA binary checkpoint format.

Layout (all integers little-endian)::

    b"FWCA"  u8 version=1  u32 tensor_count
    per tensor:
        u16 name_len  name (UTF-8)  u8 ndim  ndim * u32 dims  float32 payload (row-major)

Parameters are float64 in memory and are cast to float32 only here.
"""

from __future__ import annotations

import hashlib
import io
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import CheckpointFormatError
from .model import Model, model_from_tensors

MAGIC = b"FWCA"
VERSION = 1


def encode_tensors(tensors: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<BI", VERSION, len(tensors)))
    for name, value in tensors.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(value, dtype="<f4")
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise CheckpointFormatError(f"tensor {name!r} cannot be encoded")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes(order="C"))
    return buf.getvalue()


def decode_tensors(data: bytes) -> dict[str, np.ndarray]:
    """Parse checkpoint bytes into float32 arrays, validating every field."""
    view = memoryview(data)
    pos = 0

    def take(n: int, what: str) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointFormatError(f"truncated checkpoint while reading {what}")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4, "magic")) != MAGIC:
        raise CheckpointFormatError("bad magic bytes, not an FWCA checkpoint")
    version, count = struct.unpack("<BI", take(5, "header"))
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        try:
            name = bytes(take(name_len, "name")).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointFormatError("tensor name is not valid UTF-8") from exc
        (ndim,) = struct.unpack("<B", take(1, "ndim"))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim, "dims"))
        size = int(np.prod(dims, dtype=np.int64))
        payload = take(4 * size, f"payload of {name!r}")
        if name in out:
            raise CheckpointFormatError(f"duplicate tensor name {name!r}")
        out[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    if pos != len(view):
        raise CheckpointFormatError(f"{len(view) - pos} trailing bytes after last tensor")
    return out


def save_checkpoint(path, model_or_tensors) -> None:
    tensors = (
        model_or_tensors.tensors() if isinstance(model_or_tensors, Model) else model_or_tensors
    )
    Path(path).write_bytes(encode_tensors(tensors))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Tensors upcast to float64, in file order."""
    raw = decode_tensors(Path(path).read_bytes())
    return {k: v.astype(np.float64) for k, v in raw.items()}


def load_model(path, frozen: bool = True) -> Model:
    return model_from_tensors(load_checkpoint(path), frozen=frozen)


@dataclass(frozen=True)
class TensorInfo:
    name: str
    shape: tuple[int, ...]
    sha256: str


def manifest(path) -> list[TensorInfo]:
    raw = decode_tensors(Path(path).read_bytes())
    return [
        TensorInfo(name, tuple(int(d) for d in arr.shape), hashlib.sha256(arr.astype("<f4").tobytes()).hexdigest())
        for name, arr in raw.items()
    ]


def tensor_digest(array: np.ndarray) -> str:
    """SHA-256 of a tensor's float64 bytes (used for frozen-classifier audits)."""
    return hashlib.sha256(np.ascontiguousarray(array, dtype="<f8").tobytes()).hexdigest()
