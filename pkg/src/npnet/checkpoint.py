"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"NPNT"                       magic
    u32 version                   = 1
    u32 length + UTF-8 text       config, one ``key=value`` per line
    u32 tensor count
    per tensor:
        u16 length + UTF-8 name
        u8  dtype                 0 = float32
        u32 ndim, ndim * u32 dims
        raw little-endian values

Learnable parameters are written first (model order), followed by the
batchnorm running statistics.
"""

from __future__ import annotations

import io
import os
import struct

import numpy as np

from .model import ModelConfig, NPNet, build_npnet

MAGIC = b"NPNT"
VERSION = 1
DTYPE_F32 = 0


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


def model_tensors(model: NPNet) -> list[tuple[str, np.ndarray]]:
    return [(p.name, p.value) for p in model.parameters()] + list(model.buffers())


def dumps(model: NPNet) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    cfg = "".join(f"{k}={v}\n" for k, v in model.config.to_items()).encode("utf-8")
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    tensors = model_tensors(model)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        raw_name = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw_name)))
        buf.write(raw_name)
        buf.write(struct.pack("<BI", DTYPE_F32, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def save_checkpoint(model: NPNet, path) -> None:
    data = dumps(model)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data: bytes, source: str):
        self.data = data
        self.pos = 0
        self.source = source

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedCheckpointError(
                f"{self.source}: truncated while reading {what} (need {n} bytes at offset {self.pos}, "
                f"file has {len(self.data)})"
            )
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def loads(data: bytes, source: str = "<bytes>") -> NPNet:
    r = _Reader(data, source)
    magic = data[:4]
    if magic != MAGIC:
        raise BadMagicError(f"{source}: bad magic {magic!r}, expected {MAGIC!r}")
    r.pos = 4
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise UnsupportedVersionError(f"{source}: unsupported checkpoint version {version} (supported: {VERSION})")
    (cfg_len,) = r.unpack("<I", "config length")
    cfg_text = r.take(cfg_len, "config block").decode("utf-8")
    items = [line.split("=", 1) for line in cfg_text.splitlines() if line]
    config = ModelConfig.from_items(items)
    (count,) = r.unpack("<I", "tensor count")
    stored = {}
    for i in range(count):
        (name_len,) = r.unpack("<H", f"name length of tensor {i}")
        name = r.take(name_len, f"name of tensor {i}").decode("utf-8")
        dtype, ndim = r.unpack("<BI", f"header of tensor {name}")
        if dtype != DTYPE_F32:
            raise CheckpointError(f"{source}: tensor {name} has unsupported dtype code {dtype}")
        dims = r.unpack(f"<{ndim}I", f"dims of tensor {name}")
        nbytes = 4 * int(np.prod(dims, dtype=np.int64))
        stored[name] = np.frombuffer(r.take(nbytes, f"values of tensor {name}"), dtype="<f4").reshape(dims)
    if r.pos != len(data):
        raise CheckpointError(f"{source}: {len(data) - r.pos} trailing bytes after last tensor")

    model = build_npnet(config)
    expected = model_tensors(model)
    missing = [n for n, _ in expected if n not in stored]
    if missing:
        raise CheckpointError(f"{source}: missing tensors {missing[:5]}")
    for name, arr in expected:
        src = stored[name]
        if src.shape != arr.shape:
            raise CheckpointError(f"{source}: tensor {name} has shape {src.shape}, model expects {arr.shape}")
        arr[...] = src
    return model


def load_checkpoint(path) -> NPNet:
    with open(path, "rb") as f:
        return loads(f.read(), str(path))
