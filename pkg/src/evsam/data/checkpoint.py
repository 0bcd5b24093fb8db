"""Binary checkpoint format (all integers little-endian).

::

    magic        8 bytes   b"EVSAMCK\\x00"
    version      u32       1
    meta_len     u32       length of the metadata block
    metadata     bytes     UTF-8 JSON, keys sorted, no whitespace
    n_tensors    u32
    per tensor:
        name_len u16, name UTF-8
        dtype    u8        0 = float32
        ndim     u8
        dims     u32 * ndim
        payload  float32 little-endian, row-major
    crc32        u32       of every preceding byte

Identical state always serializes to identical bytes.
"""
from __future__ import annotations

import json
import struct
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"EVSAMCK\x00"
VERSION = 1
DTYPE_F32 = 0


class CheckpointError(Exception):
    code = "checkpoint"


class CheckpointCorruptError(CheckpointError):
    """Truncated file, bad magic or checksum, or malformed table."""
    code = "corrupt"


class CheckpointVersionError(CheckpointError):
    """File written by an unsupported format version."""
    code = "version"


class CheckpointShapeError(CheckpointError):
    """Tensor table does not match the model it is loaded into."""
    code = "shape"


@dataclass
class Checkpoint:
    tensors: "OrderedDict[str, np.ndarray]"
    metadata: dict = field(default_factory=dict)

    def num_elements(self) -> int:
        return sum(int(t.size) for t in self.tensors.values())


def dumps(ckpt: Checkpoint) -> bytes:
    meta = json.dumps(ckpt.metadata, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out = [MAGIC, struct.pack("<II", VERSION, len(meta)), meta, struct.pack("<I", len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        key = name.encode("utf-8")
        out.append(struct.pack("<H", len(key)) + key)
        out.append(struct.pack("<BB", DTYPE_F32, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    body = b"".join(out)
    return body + struct.pack("<I", zlib.crc32(body))


def loads(raw: bytes) -> Checkpoint:
    if len(raw) < len(MAGIC) + 12 or raw[: len(MAGIC)] != MAGIC:
        raise CheckpointCorruptError("missing checkpoint magic")
    version, meta_len = struct.unpack_from("<II", raw, len(MAGIC))
    if version != VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version}")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointCorruptError("checksum mismatch (truncated or modified file)")
    try:
        pos = len(MAGIC) + 8
        metadata = json.loads(body[pos:pos + meta_len].decode("utf-8"))
        pos += meta_len
        (n,) = struct.unpack_from("<I", body, pos)
        pos += 4
        tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for _ in range(n):
            (klen,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos:pos + klen].decode("utf-8")
            pos += klen
            dtype, ndim = struct.unpack_from("<BB", body, pos)
            pos += 2
            if dtype != DTYPE_F32:
                raise CheckpointCorruptError(f"unknown dtype tag {dtype} for {name}")
            shape = struct.unpack_from(f"<{ndim}I", body, pos)
            pos += 4 * ndim
            count = int(np.prod(shape, dtype=np.int64))
            if pos + 4 * count > len(body):
                raise CheckpointCorruptError(f"payload of {name} runs past end of file")
            tensors[name] = np.frombuffer(body, dtype="<f4", count=count, offset=pos).reshape(shape).astype(np.float32)
            pos += 4 * count
        if pos != len(body):
            raise CheckpointCorruptError("trailing bytes after tensor table")
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointCorruptError(str(exc)) from exc
    return Checkpoint(tensors, metadata)


def save_checkpoint(path, model, metadata: dict | None = None) -> Checkpoint:
    ckpt = Checkpoint(model.state_dict() if hasattr(model, "state_dict") else OrderedDict(model),
                      dict(metadata or {}))
    Path(path).write_bytes(dumps(ckpt))
    return ckpt


def load_checkpoint(path, model=None) -> Checkpoint:
    """Read ``path``; when ``model`` is given, validate and load its tensors."""
    ckpt = loads(Path(path).read_bytes())
    if model is not None:
        check_compatible(ckpt, model)
        model.load_state_dict(ckpt.tensors)
    return ckpt


def check_compatible(ckpt: Checkpoint, model) -> None:
    own = OrderedDict(model.named_parameters())
    for name, p in own.items():
        if name not in ckpt.tensors:
            raise CheckpointShapeError(f"tensor {name} missing from checkpoint")
        if ckpt.tensors[name].shape != p.shape:
            raise CheckpointShapeError(
                f"tensor {name}: checkpoint shape {ckpt.tensors[name].shape} vs model {p.shape}")
    extra = [n for n in ckpt.tensors if n not in own]
    if extra:
        raise CheckpointShapeError(f"tensor {extra[0]} is not part of the model")
