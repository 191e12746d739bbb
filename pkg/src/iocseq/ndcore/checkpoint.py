"""Named-tensor checkpoint container.

Layout (little-endian)::

    b"IOCS" | u32 version | u32 tensor count
    per tensor: u16 name length | UTF-8 name | u8 rank | rank x u64 dims
                | float32 row-major payload
    trailing UTF-8 metadata: one ``key=value`` line per entry

Values must not contain newlines; JSON values are written compactly.
"""

from __future__ import annotations

import io
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

MAGIC = b"IOCS"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(tensors: "dict[str, np.ndarray]", metadata: "dict[str, str] | None" = None) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(tensors)))
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {name[:40]}...")
        if arr.ndim > 0xFF:
            raise CheckpointError(f"tensor {name!r} has rank {arr.ndim} > 255")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes(order="C"))
    for key, value in (metadata or {}).items():
        value = str(value)
        if "=" in key or "\n" in key or "\n" in value:
            raise CheckpointError(f"metadata entry {key!r} contains '=' in key or a newline")
        buf.write(f"{key}={value}\n".encode("utf-8"))
    return buf.getvalue()


def loads(data: bytes) -> "tuple[OrderedDict[str, np.ndarray], dict[str, str]]":
    view = memoryview(data)
    if bytes(view[:4]) != MAGIC:
        raise CheckpointError("not an IOCS checkpoint (bad magic)")
    try:
        version, count = struct.unpack_from("<II", view, 4)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos = 12
        tensors: OrderedDict[str, np.ndarray] = OrderedDict()
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", view, pos)
            pos += 2
            name = bytes(view[pos:pos + nlen]).decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", view, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}Q", view, pos)
            pos += 8 * rank
            n = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(dims)
            pos += 4 * n
            tensors[name] = arr.astype(np.float32)
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    metadata: dict[str, str] = {}
    for line in bytes(view[pos:]).decode("utf-8").splitlines():
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise CheckpointError(f"malformed metadata line {line!r}")
        metadata[key] = value
    return tensors, metadata


def save(path, tensors, metadata=None) -> None:
    Path(path).write_bytes(dumps(tensors, metadata))


def load(path):
    return loads(Path(path).read_bytes())
