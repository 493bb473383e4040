"""Versioned binary container of named tensors.

Layout (all little-endian)::

    magic   b"HCTC"
    version u16
    kind    4 bytes          e.g. b"CKPT", b"PRIO"
    meta    u32 length + UTF-8 JSON
    count   u32
    entries count x { name: u16 length + UTF-8,
                      dtype: u8 (0 = float32, 1 = float64, 2 = int64),
                      ndim: u8, dims: ndim x u32, raw values }
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"HCTC"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("int64"): 2}


class ContainerFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def dumps(tensors: dict[str, np.ndarray], kind: bytes, meta: dict | None = None) -> bytes:
    if len(kind) != 4:
        raise ValueError("kind must be 4 bytes")
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<H", VERSION), kind, struct.pack("<I", len(meta_bytes)), meta_bytes]
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = _CODES.get(arr.dtype)
        if code is None:
            raise TypeError(f"{name}: unsupported dtype {arr.dtype}")
        raw_name = name.encode()
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise ContainerFormatError(f"truncated while reading {what}", self.pos)
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def loads(buf: bytes, kind: bytes | None = None) -> tuple[dict[str, np.ndarray], dict]:
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise ContainerFormatError("bad magic", 0)
    (version,) = r.unpack("<H", "version")
    if version != VERSION:
        raise ContainerFormatError(f"unsupported version {version}", 4)
    got_kind = r.take(4, "kind")
    if kind is not None and got_kind != kind:
        raise ContainerFormatError(f"expected {kind!r} container, found {got_kind!r}", 6)
    (meta_len,) = r.unpack("<I", "meta length")
    meta_at = r.pos
    try:
        meta = json.loads(r.take(meta_len, "meta").decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerFormatError(f"malformed metadata: {exc}", meta_at) from None
    (count,) = r.unpack("<I", "entry count")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = r.unpack("<H", "name length")
        name = r.take(n, "name").decode()
        at = r.pos
        code, ndim = r.unpack("<BB", "dtype/ndim")
        if code not in _DTYPES:
            raise ContainerFormatError(f"{name}: unknown dtype code {code}", at)
        dims = r.unpack(f"<{ndim}I", "dims")
        dt = _DTYPES[code]
        size = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        tensors[name] = np.frombuffer(r.take(size, f"values of {name}"), dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
    if r.pos != len(buf):
        raise ContainerFormatError("trailing bytes after last entry", r.pos)
    return tensors, meta


def save(path: str | Path, tensors: dict[str, np.ndarray], kind: bytes, meta: dict | None = None) -> None:
    Path(path).write_bytes(dumps(tensors, kind, meta))


def load(path: str | Path, kind: bytes | None = None) -> tuple[dict[str, np.ndarray], dict]:
    return loads(Path(path).read_bytes(), kind)
