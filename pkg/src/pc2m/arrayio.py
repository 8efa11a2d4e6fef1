"""Named-array container used for checkpoints and dataset files.

Layout (all integers little-endian)::

    magic   4 bytes  b"PC2M"
    version uint32
    count   uint32
    then per array:
        name_len uint32, name utf-8 bytes
        dtype    4 bytes, b"f8\\0\\0" or b"i8\\0\\0"
        ndim     uint32
        shape    ndim x uint64
        payload  prod(shape) little-endian items
"""

from __future__ import annotations

import io
import os
import struct
from typing import Mapping

import numpy as np

MAGIC = b"PC2M"
VERSION = 1
_DTYPES = {b"f8\0\0": np.dtype("<f8"), b"i8\0\0": np.dtype("<i8")}
_CODES = {v.str: k for k, v in _DTYPES.items()}


class FormatError(ValueError):
    pass


def dumps(arrays: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(arrays)))
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if np.issubdtype(arr.dtype, np.integer) or arr.dtype == bool:
            arr = arr.astype("<i8")
        else:
            arr = arr.astype("<f8")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(_CODES[arr.dtype.str])
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())
    return buf.getvalue()


def loads(data: bytes) -> dict[str, np.ndarray]:
    view = memoryview(data)
    if bytes(view[:4]) != MAGIC:
        raise FormatError("bad magic, not a PC2M array file")
    if len(view) < 12:
        raise FormatError("truncated header")
    version, count = struct.unpack_from("<II", view, 4)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    pos = 12
    out = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", view, pos)
            pos += 4
            name = bytes(view[pos:pos + name_len]).decode("utf-8")
            pos += name_len
            code = bytes(view[pos:pos + 4])
            pos += 4
            if code not in _DTYPES:
                raise FormatError(f"unknown dtype code {code!r} for {name}")
            dtype = _DTYPES[code]
            (ndim,) = struct.unpack_from("<I", view, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}Q", view, pos)
            pos += 8 * ndim
            nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            if pos + nbytes > len(view):
                raise FormatError(f"truncated payload for {name}")
            out[name] = np.frombuffer(view[pos:pos + nbytes], dtype=dtype).reshape(shape).copy()
            pos += nbytes
    except struct.error as exc:
        raise FormatError(f"truncated file: {exc}") from exc
    if pos != len(view):
        raise FormatError("trailing bytes after last array")
    return out


def save(path: str | os.PathLike, arrays: Mapping[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(arrays))


def load(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return loads(fh.read())
