"""Binary checkpoint container.

Layout (little-endian)::

    b"LT3D" | version u32 | config sha256 (32 bytes)
    repeated until EOF:
        name length u16 | name utf-8 | rank u8 | extents u32 * rank | float32 payload
"""
from __future__ import annotations

import math
import os
import struct

import numpy as np

from .errors import DataError, FormatError

MAGIC = b"LT3D"
VERSION = 1
DIGEST_BYTES = 32


def encode(tensors, digest):
    if len(digest) != DIGEST_BYTES:
        raise ValueError(f"digest must be {DIGEST_BYTES} bytes")
    parts = [MAGIC, struct.pack("<I", VERSION), bytes(digest)]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f4")
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def decode(buf):
    """Return ``(tensors, digest)``; any structural defect raises FormatError with its offset."""
    head = 8 + DIGEST_BYTES
    if len(buf) < head:
        raise FormatError("truncated checkpoint header", len(buf))
    if buf[:4] != MAGIC:
        raise FormatError(f"bad magic {bytes(buf[:4])!r}", 0)
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    digest = bytes(buf[8:head])
    pos = head
    tensors = {}
    while pos < len(buf):
        start = pos
        if pos + 2 > len(buf):
            raise FormatError("truncated name length", pos)
        (n,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        if pos + n + 1 > len(buf):
            raise FormatError("truncated tensor name", pos)
        name = bytes(buf[pos:pos + n]).decode("utf-8", errors="strict")
        pos += n
        rank = buf[pos]
        pos += 1
        if pos + 4 * rank > len(buf):
            raise FormatError(f"truncated extents of {name!r}", pos)
        shape = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        nbytes = 4 * math.prod(shape)
        if pos + nbytes > len(buf):
            raise FormatError(f"truncated payload of {name!r}", len(buf))
        if name in tensors:
            raise FormatError(f"duplicate tensor {name!r}", start)
        tensors[name] = np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=pos).astype(np.float32).reshape(shape)
        pos += nbytes
    return tensors, digest


def save_checkpoint(path, tensors, digest):
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(encode(tensors, digest))
    os.replace(tmp, path)


def load_checkpoint(path):
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode(buf)
