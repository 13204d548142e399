"""Versioned binary checkpoint format.

Layout (all integers little-endian)::

    b"STCD" | u32 version | u32 tensor_count
    per tensor: u32 name_len | name (UTF-8) | u32 ndim | u32 dims[ndim] | f32 data (row-major)
    u64 checksum

The checksum is BLAKE2b with an 8-byte digest over every preceding byte,
read as a little-endian u64. Training metadata (config hash, epoch, seed,
loss history) is kept in a JSON sidecar ``<path>.meta.json``.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"STCD"
VERSION = 1


class CheckpointError(Exception):
    """Base class for checkpoint read failures."""


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


class TensorShapeError(CheckpointError):
    """A tensor is missing or its shape differs from the expected layout."""


@dataclass
class Checkpoint:
    tensors: dict
    meta: dict = field(default_factory=dict)
    version: int = VERSION

    def params(self, requires_grad: bool = False) -> dict:
        from .autodiff import Tensor

        return {k: Tensor(np.array(v, dtype=np.float32), requires_grad=requires_grad) for k, v in self.tensors.items()}

    def subset(self, prefixes) -> dict:
        return {k: v for k, v in self.tensors.items() if k.startswith(tuple(prefixes))}

    def validate(self, expected: dict):
        """Check that every name in ``expected`` (name -> shape) is present with that shape."""
        for name, shape in expected.items():
            if name not in self.tensors:
                raise TensorShapeError(f"checkpoint lacks tensor {name!r}")
            if tuple(self.tensors[name].shape) != tuple(shape):
                raise TensorShapeError(f"tensor {name!r} has shape {self.tensors[name].shape}, expected {tuple(shape)}")
        return self


def checksum(data: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


def tensor_header(name: str, shape) -> bytes:
    raw = name.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw + struct.pack("<I", len(shape)) + struct.pack(f"<{len(shape)}I", *shape)


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<II", ckpt.version, len(ckpt.tensors))]
    for name in sorted(ckpt.tensors):
        arr = np.asarray(ckpt.tensors[name])
        parts.append(tensor_header(name, arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<Q", checksum(body))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedCheckpointError(f"checkpoint truncated at byte {len(self.data)} (needed {self.pos + n})")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def decode_checkpoint(data: bytes) -> Checkpoint:
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError(f"bad magic: expected {MAGIC!r}, got {data[:4]!r}")
    r = _Reader(data)
    r.take(4)
    version = r.u32()
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version} is not supported (expected {VERSION})")
    count = r.u32()
    tensors = {}
    for _ in range(count):
        name = r.take(r.u32()).decode("utf-8")
        ndim = r.u32()
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        n = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
    body_end = r.pos
    (stored,) = struct.unpack("<Q", r.take(8))
    if r.pos != len(data):
        raise ChecksumError(f"{len(data) - r.pos} unexpected trailing bytes")
    if stored != checksum(data[:body_end]):
        raise ChecksumError("checkpoint checksum mismatch")
    return Checkpoint(tensors=tensors, version=version)


def save_checkpoint(path, ckpt: Checkpoint):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(ckpt))
    meta_path = path.with_name(path.name + ".meta.json")
    meta_path.write_text(json.dumps(ckpt.meta, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def load_checkpoint(path, expected: dict | None = None) -> Checkpoint:
    path = Path(path)
    ckpt = decode_checkpoint(path.read_bytes())
    meta_path = path.with_name(path.name + ".meta.json")
    if meta_path.exists():
        ckpt.meta = json.loads(meta_path.read_text(encoding="utf-8"))
    if expected is not None:
        ckpt.validate(expected)
    return ckpt
