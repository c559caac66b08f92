"""Versioned binary checkpoint format shared by the trained models.

Layout: magic, format version, kind string, canonical JSON metadata, then
named numpy arrays. Writing the same model twice produces identical bytes.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import ParseError

MAGIC = b"CFCK"
VERSION = 1


def _write_bytes(fh, blob: bytes) -> None:
    fh.write(struct.pack("<I", len(blob)))
    fh.write(blob)


def _read_bytes(fh) -> bytes:
    (length,) = struct.unpack("<I", fh.read(4))
    return fh.read(length)


def write_checkpoint(path, kind: str, meta: dict, arrays: dict) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<H", VERSION))
        _write_bytes(fh, kind.encode("utf-8"))
        _write_bytes(fh, json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8"))
        fh.write(struct.pack("<I", len(arrays)))
        for name in sorted(arrays):
            array = np.ascontiguousarray(arrays[name])
            _write_bytes(fh, name.encode("utf-8"))
            _write_bytes(fh, str(array.dtype).encode("utf-8"))
            fh.write(struct.pack("<I", array.ndim))
            fh.write(struct.pack(f"<{array.ndim}Q", *array.shape))
            fh.write(array.tobytes())


def read_checkpoint(path, kind: str):
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ParseError(f"not a checkpoint file: {path}")
        (version,) = struct.unpack("<H", fh.read(2))
        if version != VERSION:
            raise ParseError(f"unsupported checkpoint version {version}")
        found = _read_bytes(fh).decode("utf-8")
        if found != kind:
            raise ParseError(f"checkpoint kind mismatch: expected {kind!r}, found {found!r}")
        meta = json.loads(_read_bytes(fh).decode("utf-8"))
        (count,) = struct.unpack("<I", fh.read(4))
        arrays = {}
        for _ in range(count):
            name = _read_bytes(fh).decode("utf-8")
            dtype = np.dtype(_read_bytes(fh).decode("utf-8"))
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim)) if ndim else ()
            size = int(np.prod(shape, dtype=np.int64)) if shape else 1
            blob = fh.read(size * dtype.itemsize)
            arrays[name] = np.frombuffer(blob, dtype=dtype).reshape(shape).copy()
    return meta, arrays
