"""The "MAME" binary container shared by datasets and checkpoints.

Every file starts with ``b"MAME" | u32 version | u32 kind``, little-endian.
The body layout belongs to the module that owns the kind.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"MAME"
VERSION = 1
KIND_DATASET = 1
KIND_CHECKPOINT = 2

_KIND_NAMES = {KIND_DATASET: "dataset", KIND_CHECKPOINT: "checkpoint"}


class ContainerError(ValueError):
    pass


class Writer:
    def __init__(self, kind: int):
        self.parts: list[bytes] = [MAGIC, struct.pack("<II", VERSION, kind)]

    def pack(self, fmt: str, *values) -> None:
        self.parts.append(struct.pack(fmt, *values))

    def raw(self, data: bytes) -> None:
        self.parts.append(data)

    def json(self, obj) -> None:
        data = json.dumps(obj, sort_keys=True).encode()
        self.pack("<I", len(data))
        self.raw(data)

    def array(self, arr: np.ndarray, dtype: str) -> None:
        self.raw(np.ascontiguousarray(arr, dtype=dtype).tobytes())

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(b"".join(self.parts))


class Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    @classmethod
    def open(cls, path, kind: int) -> "Reader":
        with open(path, "rb") as fh:
            rd = cls(fh.read())
        rd.header(kind)
        return rd

    def header(self, kind: int) -> None:
        if self.take(4) != MAGIC:
            raise ContainerError("bad magic: not a MAME file")
        version, got = self.unpack("<II")
        if version != VERSION:
            raise ContainerError(f"unsupported container version {version}")
        if got != kind:
            raise ContainerError(f"file holds a {_KIND_NAMES.get(got, got)}, "
                                 f"expected a {_KIND_NAMES.get(kind, kind)}")

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise ContainerError("short read: file is truncated")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def json(self):
        (n,) = self.unpack("<I")
        return json.loads(self.take(n).decode())

    def array(self, dtype: str, shape) -> np.ndarray:
        dt = np.dtype(dtype)
        count = int(np.prod(shape)) if len(shape) else 1
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt).reshape(shape)
